//! Command-line front end: `train`, `eval`, `gradcheck`, `cost`, `recode`.
//!
//! Run settings come from an optional `key=value` file (`--config`) and are
//! then overridden by flags of the same name.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::costing::{CostAssumptions, CostReport};
use crate::data::{
    load_cifar10_dir, load_records, make_synthetic, AugmentSpec, ImageBatch, LabeledImageSet, SyntheticKind,
};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, tiny_config, GradCheckOptions};
use crate::lookup::{LookupTables, TableKind};
use crate::network::{ChannelStats, ConvBlock, Model, ModelConfig, Standardization};
use crate::recode::write_recoded;
use crate::trainer::{
    evaluate, train_cross_network, train_cross_task, train_single, Alternation, InputStage, LrSchedule, Metrics,
    OptimState, TrainPlan, CSV_HEADER,
};

/// Environment variable naming the default CIFAR-10 directory.
pub const DATA_DIR_ENV: &str = "LVN_DATA_DIR";
pub const CHECKPOINT_FILE: &str = "checkpoint.lvnc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_CONFIG_FILE: &str = "run.conf";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Single,
    CrossNetwork,
    CrossTask,
}

impl Strategy {
    fn as_str(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::CrossNetwork => "cross-network",
            Strategy::CrossTask => "cross-task",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableChoice {
    Full,
    Compressed,
    /// Plain network behind standardization.
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub dataset_b: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub classes: usize,
    pub image_size: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,
    pub table: TableChoice,
    pub dim: usize,
    pub cmp_rate: usize,
    pub standardize: String,
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub head: usize,
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_g: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_tables: bool,
    pub milestones: Vec<usize>,
    pub lr_divisor: f64,
    pub alternation: Alternation,
    pub freeze_tables: bool,
    pub augment: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic:separable".into(),
            dataset_b: None,
            data_dir: None,
            classes: 10,
            image_size: 16,
            per_class: 20,
            test_per_class: 10,
            data_seed: 0,
            table: TableChoice::Full,
            dim: 1,
            cmp_rate: 4,
            standardize: "per-image".into(),
            filters: vec![16, 32, 32],
            kernel: 3,
            head: 64,
            strategy: Strategy::Single,
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            lr_g: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_tables: false,
            milestones: Vec::new(),
            lr_divisor: 10.0,
            alternation: Alternation::Steps(1),
            freeze_tables: false,
            augment: false,
            seed: 0,
            out: PathBuf::from("lvnet-run"),
            record_time: false,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(key, format!("cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(bad(key, format!("expected true or false, got `{other}`"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one setting. Unknown keys and unparsable values are errors
    /// naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "dataset-b" => self.dataset_b = (!v.is_empty()).then(|| v.to_string()),
            "data-dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "classes" => self.classes = parse(key, v)?,
            "image-size" => self.image_size = parse(key, v)?,
            "per-class" => self.per_class = parse(key, v)?,
            "test-per-class" => self.test_per_class = parse(key, v)?,
            "data-seed" => self.data_seed = parse(key, v)?,
            "table" => {
                self.table = match v {
                    "full" => TableChoice::Full,
                    "compressed" => TableChoice::Compressed,
                    "none" | "baseline" => TableChoice::Baseline,
                    other => return Err(bad(key, format!("expected full, compressed or none, got `{other}`"))),
                }
            }
            "baseline" => {
                if parse_bool(key, v)? {
                    self.table = TableChoice::Baseline;
                }
            }
            "dim" => self.dim = parse(key, v)?,
            "cmp-rate" => self.cmp_rate = parse(key, v)?,
            "standardize" => match v {
                "per-image" | "dataset" => self.standardize = v.to_string(),
                other => return Err(bad(key, format!("expected per-image or dataset, got `{other}`"))),
            },
            "filters" => self.filters = parse_list(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "head" => self.head = parse(key, v)?,
            "strategy" => {
                self.strategy = match v {
                    "single" => Strategy::Single,
                    "cross-network" => Strategy::CrossNetwork,
                    "cross-task" => Strategy::CrossTask,
                    other => {
                        return Err(bad(key, format!("expected single, cross-network or cross-task, got `{other}`")))
                    }
                }
            }
            "epochs" => self.epochs = parse(key, v)?,
            "batch-size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr-g" => self.lr_g = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "momentum" => self.momentum = parse(key, v)?,
            "weight-decay" => self.weight_decay = parse(key, v)?,
            "decay-tables" => self.decay_tables = parse_bool(key, v)?,
            "milestones" => self.milestones = parse_list(key, v)?,
            "lr-divisor" => self.lr_divisor = parse(key, v)?,
            "alternation" => {
                self.alternation = match v {
                    "epoch" => Alternation::Epoch,
                    n => Alternation::Steps(parse(key, n)?),
                }
            }
            "freeze-tables" => self.freeze_tables = parse_bool(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "record-time" => self.record_time = parse_bool(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(line, "expected key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| bad("config", format!("{}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Canonical `key=value` text; [`RunConfig::apply_text`] reads it back.
    pub fn render(&self) -> String {
        let table = match self.table {
            TableChoice::Full => "full",
            TableChoice::Compressed => "compressed",
            TableChoice::Baseline => "none",
        };
        let alternation = match self.alternation {
            Alternation::Epoch => "epoch".to_string(),
            Alternation::Steps(n) => n.to_string(),
        };
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.clone()),
            ("dataset-b", self.dataset_b.clone().unwrap_or_default()),
            ("data-dir", opt(&self.data_dir)),
            ("classes", self.classes.to_string()),
            ("image-size", self.image_size.to_string()),
            ("per-class", self.per_class.to_string()),
            ("test-per-class", self.test_per_class.to_string()),
            ("data-seed", self.data_seed.to_string()),
            ("table", table.into()),
            ("dim", self.dim.to_string()),
            ("cmp-rate", self.cmp_rate.to_string()),
            ("standardize", self.standardize.clone()),
            ("filters", join(&self.filters)),
            ("kernel", self.kernel.to_string()),
            ("head", self.head.to_string()),
            ("strategy", self.strategy.as_str().into()),
            ("epochs", self.epochs.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr-g", self.lr_g.map(|v| v.to_string()).unwrap_or_default()),
            ("momentum", self.momentum.to_string()),
            ("weight-decay", self.weight_decay.to_string()),
            ("decay-tables", self.decay_tables.to_string()),
            ("milestones", join(&self.milestones)),
            ("lr-divisor", self.lr_divisor.to_string()),
            ("alternation", alternation),
            ("freeze-tables", self.freeze_tables.to_string()),
            ("augment", self.augment.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("record-time", self.record_time.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn table_kind(&self) -> Result<Option<TableKind>> {
        let kind = match self.table {
            TableChoice::Baseline => return Ok(None),
            TableChoice::Full => TableKind::Full { dim: self.dim },
            TableChoice::Compressed => TableKind::Compressed { cmp_rate: self.cmp_rate },
        };
        let key = if matches!(kind, TableKind::Full { .. }) { "dim" } else { "cmp-rate" };
        kind.validate().map(Some).map_err(|e| bad(key, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.table_kind()?;
        for (key, v) in [
            ("epochs", self.epochs),
            ("batch-size", self.batch_size),
            ("kernel", self.kernel),
            ("head", self.head),
            ("classes", self.classes),
            ("image-size", self.image_size),
            ("per-class", self.per_class),
            ("test-per-class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(bad("filters", "need at least one positive filter count"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(bad("kernel", "must be odd"));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(bad("lr", "learning rate, momentum and weight decay must be non-negative"));
        }
        if self.alternation == Alternation::Steps(0) {
            return Err(bad("alternation", "must be positive or `epoch`"));
        }
        if self.strategy != Strategy::Single && self.table == TableChoice::Baseline {
            return Err(bad("strategy", "cross strategies share lookup tables; a baseline has none"));
        }
        if self.strategy == Strategy::CrossTask && self.dataset_b.is_none() {
            return Err(bad("dataset-b", "cross-task training needs a second dataset"));
        }
        if self.seed >= 1 << 53 {
            return Err(bad("seed", "must be below 2^53"));
        }
        Ok(())
    }

    pub fn optim(&self, lr: f64) -> OptimState {
        let schedule = if self.milestones.is_empty() {
            LrSchedule::Constant
        } else {
            LrSchedule::Milestones {
                epochs: self.milestones.clone(),
                divisor: self.lr_divisor,
            }
        };
        let mut o = OptimState::new(lr, self.momentum, self.weight_decay).with_schedule(schedule);
        o.decay_tables = self.decay_tables;
        o
    }

    pub fn plan(&self, side: usize) -> TrainPlan {
        let mut p = TrainPlan::new(self.epochs, self.batch_size, self.seed);
        p.alternation = self.alternation;
        p.freeze_tables = self.freeze_tables;
        p.augment = self.augment.then(|| AugmentSpec::standard(side));
        p
    }

    pub fn model_config(&self, input_channels: usize, set: &LabeledImageSet, seed: u64) -> ModelConfig {
        ModelConfig {
            input_channels,
            height: set.height(),
            width: set.width(),
            conv_blocks: self.filters.iter().map(|&f| ConvBlock::new(self.kernel, f, 1, true)).collect(),
            head_width: self.head,
            classes: set.classes(),
            seed,
        }
    }

    /// `(train, test)` for a dataset spec:
    /// `synthetic:separable`, `synthetic:striped`, `cifar10[:DIR]`,
    /// `records:TRAIN[,TEST]`.
    pub fn load(&self, spec: &str) -> Result<(LabeledImageSet, LabeledImageSet)> {
        let (scheme, rest) = spec.split_once(':').unwrap_or((spec, ""));
        match scheme {
            "synthetic" => {
                let kind: SyntheticKind = rest.parse().map_err(|e: Error| bad("dataset", e.to_string()))?;
                let s = self.image_size;
                let train = make_synthetic(kind, self.per_class, self.classes, s, s, self.data_seed)?;
                let test = make_synthetic(kind, self.test_per_class, self.classes, s, s, self.data_seed ^ TEST_SEED_MIX)?;
                Ok((train, test))
            }
            "cifar10" => {
                let dir = if !rest.is_empty() {
                    PathBuf::from(rest)
                } else if let Some(d) = &self.data_dir {
                    d.clone()
                } else if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
                    PathBuf::from(d)
                } else {
                    return Err(bad("dataset", format!("cifar10 needs a directory: use cifar10:DIR, data-dir or {DATA_DIR_ENV}")));
                };
                if !dir.is_dir() {
                    return Err(bad("dataset", format!("{} is not a directory", dir.display())));
                }
                let (train, test) = load_cifar10_dir(&dir)?;
                Ok((train.balanced_subset(self.per_class)?, test.balanced_subset(self.test_per_class)?))
            }
            "records" => {
                let (tr, te) = rest.split_once(',').unwrap_or((rest, rest));
                for p in [tr, te] {
                    if !Path::new(p).is_file() {
                        return Err(bad("dataset", format!("{p} does not exist")));
                    }
                }
                Ok((load_records(tr)?, load_records(te)?))
            }
            other => Err(bad("dataset", format!("unknown dataset scheme `{other}`"))),
        }
    }
}

const TEST_SEED_MIX: u64 = 0x5EED_7E57;

/// Run settings as flags; each overrides the config-file value of the same
/// name.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// key=value file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// synthetic:separable | synthetic:striped | cifar10[:DIR] | records:TRAIN[,TEST]
    #[arg(long)]
    pub dataset: Option<String>,
    /// Second task for cross-task training.
    #[arg(long = "dataset-b")]
    pub dataset_b: Option<String>,
    #[arg(long = "data-dir")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long = "image-size")]
    pub image_size: Option<usize>,
    #[arg(long = "per-class")]
    pub per_class: Option<usize>,
    #[arg(long = "test-per-class")]
    pub test_per_class: Option<usize>,
    #[arg(long = "data-seed")]
    pub data_seed: Option<u64>,
    /// full | compressed | none
    #[arg(long)]
    pub table: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long = "cmp-rate")]
    pub cmp_rate: Option<usize>,
    /// Train the standardized network without tables.
    #[arg(long)]
    pub baseline: bool,
    /// per-image | dataset
    #[arg(long)]
    pub standardize: Option<String>,
    /// Comma-separated filter counts, one conv block each.
    #[arg(long)]
    pub filters: Option<String>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    /// single | cross-network | cross-task
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "lr-g")]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
    #[arg(long = "decay-tables")]
    pub decay_tables: bool,
    /// Comma-separated epochs at which the learning rate is divided.
    #[arg(long)]
    pub milestones: Option<String>,
    #[arg(long = "lr-divisor")]
    pub lr_divisor: Option<f64>,
    /// Steps per turn in cross strategies, or `epoch`.
    #[arg(long)]
    pub alternation: Option<String>,
    #[arg(long = "freeze-tables")]
    pub freeze_tables: bool,
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write wall-clock seconds to the metrics CSV (otherwise 0).
    #[arg(long = "record-time")]
    pub record_time: bool,
}

macro_rules! overrides {
    ($a:expr, $out:ident; $($field:ident => $key:literal),* $(,)?) => {
        $( if let Some(v) = &$a.$field { $out.push(($key, v.to_string())); } )*
    };
}

impl RunArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        overrides!(self, out;
            dataset => "dataset", dataset_b => "dataset-b", classes => "classes",
            image_size => "image-size", per_class => "per-class", test_per_class => "test-per-class",
            data_seed => "data-seed", table => "table", dim => "dim", cmp_rate => "cmp-rate",
            standardize => "standardize", filters => "filters", kernel => "kernel", head => "head",
            strategy => "strategy", epochs => "epochs", batch_size => "batch-size", lr => "lr",
            lr_g => "lr-g", momentum => "momentum", weight_decay => "weight-decay",
            milestones => "milestones", lr_divisor => "lr-divisor", alternation => "alternation",
            seed => "seed",
        );
        for (key, p) in [("data-dir", &self.data_dir), ("out", &self.out)] {
            if let Some(p) = p {
                out.push((key, p.display().to_string()));
            }
        }
        for (key, on) in [
            ("baseline", self.baseline),
            ("decay-tables", self.decay_tables),
            ("freeze-tables", self.freeze_tables),
            ("augment", self.augment),
            ("record-time", self.record_time),
        ] {
            if on {
                out.push((key, "true".into()));
            }
        }
        out
    }

    /// Config file (or `fallback` when none is given), then flags.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::from_file(p)?,
            (None, Some(p)) if p.is_file() => RunConfig::from_file(p)?,
            _ => RunConfig::default(),
        };
        for (k, v) in self.pairs() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "lvnet", version, about = "Lookup vision networks: learnable color tables trained with a CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network (and its tables) and write checkpoint + metrics.
    Train(RunArgs),
    /// Re-evaluate a checkpoint on the test split of its run.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Extra parameters, extra FLOPs and bits per pixel.
    Cost(CostArgs),
    /// Render images through learned tables as PPM files.
    Recode(RecodeArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run settings; defaults to run.conf next to the checkpoint.
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// full | compressed
    #[arg(long, default_value = "full")]
    pub table: String,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long = "cmp-rate", default_value_t = 16)]
    pub cmp_rate: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Negative control: scale the analytic table gradient by 1.01.
    #[arg(long = "corrupt-backward", hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 32)]
    pub m: u64,
    #[arg(long, default_value_t = 32)]
    pub n: u64,
    #[arg(long, default_value_t = 1)]
    pub s: u64,
    #[arg(long, default_value_t = 3)]
    pub k: u64,
    #[arg(long, default_value_t = 16)]
    pub j: u64,
    /// Full-table dimension.
    #[arg(long, default_value_t = 1, conflicts_with = "cmp_rate")]
    pub u: usize,
    /// Compressed tables instead of full ones.
    #[arg(long = "cmp-rate")]
    pub cmp_rate: Option<usize>,
    /// Print key=value lines only.
    #[arg(long)]
    pub machine: bool,
}

#[derive(Debug, Args)]
pub struct RecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for the PPM files.
    #[arg(long = "images-out")]
    pub images_out: PathBuf,
    /// Number of test images to render.
    #[arg(long, default_value_t = 16)]
    pub limit: usize,
    /// Run settings (dataset); defaults to run.conf next to the checkpoint.
    #[command(flatten)]
    pub run: RunArgs,
}

/// Outcome of a command: text for stdout and the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: String,
    pub code: u8,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self { stdout, code: 0 }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.resolve(None)?),
        Command::Eval(a) => cmd_eval(&a.checkpoint, &a.run.resolve(Some(&sibling(&a.checkpoint)))?),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Cost(a) => cmd_cost(&a),
        Command::Recode(a) => cmd_recode(
            &a.checkpoint,
            &a.run.resolve(Some(&sibling(&a.checkpoint)))?,
            &a.images_out,
            a.limit,
        ),
    }
}

fn sibling(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG_FILE)
}

fn standardization(cfg: &RunConfig, train: &LabeledImageSet) -> Standardization {
    if cfg.standardize == "dataset" {
        Standardization::Dataset(ChannelStats::of_images((0..train.len()).map(|i| train.image(i))))
    } else {
        Standardization::PerImage
    }
}

fn accuracy_line(name: &str, acc: Option<f64>) -> String {
    match acc {
        Some(a) => format!("{name}: {a:.6}\n"),
        None => format!("{name}: n/a\n"),
    }
}

/// Seeds of the independent random streams of a run.
fn seeds(seed: u64) -> (u64, u64, u64) {
    (seed, seed.wrapping_add(1), seed.wrapping_add(2))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (train, test) = cfg.load(&cfg.dataset)?;
    let (seed_f, seed_tables, seed_g) = seeds(cfg.seed);
    let kind = cfg.table_kind()?;
    let stage_channels = kind.map_or(3, TableKind::output_channels);
    let mut model_f = Model::build(cfg.model_config(stage_channels, &train, seed_f))?;
    let plan = cfg.plan(train.height());
    let mut optim_f = cfg.optim(cfg.lr);
    let mut ck = Checkpoint::new();
    let mut csv = format!("{CSV_HEADER}\n");
    let mut stdout = String::new();

    match cfg.strategy {
        Strategy::Single => {
            let mut stage = match kind {
                Some(k) => InputStage::Lookup(LookupTables::init(k, seed_tables)?),
                None => InputStage::Standardized(standardization(cfg, &train)),
            };
            let metrics = train_single(&mut model_f, &mut stage, &train, Some(&test), &plan, &mut optim_f)?;
            metrics.write_csv_rows("", cfg.record_time, &mut csv);
            match &stage {
                InputStage::Lookup(t) => ck.put_tables(t),
                InputStage::Standardized(s) => ck.put_standardization(s),
            }
            stdout.push_str(&accuracy_line("test-accuracy", metrics.final_test_accuracy()));
        }
        Strategy::CrossNetwork | Strategy::CrossTask => {
            let kind = kind.expect("validated: cross strategies use tables");
            let mut tables = LookupTables::init(kind, seed_tables)?;
            let mut optim_g = cfg.optim(cfg.lr_g.unwrap_or(cfg.lr));
            let (metrics_f, metrics_g, model_g): (Metrics, Metrics, Model) = if cfg.strategy == Strategy::CrossNetwork {
                let mut g = Model::build(cfg.model_config(stage_channels, &train, seed_g))?;
                let (mf, mg) = train_cross_network(
                    &mut model_f, &mut g, &mut tables, &train, Some(&test), &plan, &mut optim_f, &mut optim_g, None,
                )?;
                (mf, mg, g)
            } else {
                let spec_b = cfg.dataset_b.as_deref().expect("validated");
                let (train_b, test_b) = cfg.load(spec_b)?;
                let mut g = Model::build(cfg.model_config(stage_channels, &train_b, seed_g))?;
                let (mf, mg) = train_cross_task(
                    &mut model_f,
                    &mut g,
                    &mut tables,
                    (&train, Some(&test)),
                    (&train_b, Some(&test_b)),
                    &plan,
                    &mut optim_f,
                    &mut optim_g,
                    None,
                )?;
                (mf, mg, g)
            };
            metrics_f.write_csv_rows("f", cfg.record_time, &mut csv);
            metrics_g.write_csv_rows("g", cfg.record_time, &mut csv);
            ck.put_tables(&tables);
            ck.put_model("model_g", &model_g)?;
            ck.put_optim("optim_g", &optim_g, cfg.epochs);
            stdout.push_str(&accuracy_line("test-accuracy-f", metrics_f.final_test_accuracy()));
            stdout.push_str(&accuracy_line("test-accuracy-g", metrics_g.final_test_accuracy()));
        }
    }
    ck.put_model("model", &model_f)?;
    ck.put_optim("optim", &optim_f, cfg.epochs);
    ck.put_rng(cfg.seed, cfg.epochs)?;

    fs::create_dir_all(&cfg.out)?;
    ck.save(cfg.out.join(CHECKPOINT_FILE))?;
    fs::write(cfg.out.join(METRICS_FILE), csv)?;
    fs::write(cfg.out.join(RUN_CONFIG_FILE), cfg.render())?;
    Ok(Outcome::ok(stdout))
}

fn stage_from(ck: &Checkpoint) -> Result<InputStage> {
    if ck.has_tables() {
        Ok(InputStage::Lookup(ck.tables()?))
    } else {
        Ok(InputStage::Standardized(ck.standardization()?))
    }
}

pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig) -> Result<Outcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let stage = stage_from(&ck)?;
    let (_, test) = cfg.load(&cfg.dataset)?;
    let model_f = ck.model("model")?;
    if !ck.has_prefix("model_g.") {
        return Ok(Outcome::ok(accuracy_line("test-accuracy", Some(evaluate(&model_f, &stage, &test)?))));
    }
    let model_g = ck.model("model_g")?;
    let test_g = match (cfg.strategy, &cfg.dataset_b) {
        (Strategy::CrossTask, Some(spec)) => cfg.load(spec)?.1,
        _ => test.clone(),
    };
    let mut out = accuracy_line("test-accuracy-f", Some(evaluate(&model_f, &stage, &test)?));
    out.push_str(&accuracy_line("test-accuracy-g", Some(evaluate(&model_g, &stage, &test_g)?)));
    Ok(Outcome::ok(out))
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let kind = match a.table.as_str() {
        "full" => TableKind::Full { dim: a.dim },
        "compressed" => TableKind::Compressed { cmp_rate: a.cmp_rate },
        other => return Err(bad("table", format!("expected full or compressed, got `{other}`"))),
    }
    .validate()?;
    let tables = LookupTables::init(kind, a.seed.wrapping_add(1))?;
    let model = Model::build(tiny_config(kind.output_channels(), a.seed))?;
    let total = model.param_count() + tables.param_count();
    if total > 5000 {
        return Err(bad("dim", format!("tiny model would have {total} parameters, limit is 5000")));
    }
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(2));
    let n = a.batch.max(1);
    let pixels = (0..n * 3 * cfg.height * cfg.width).map(|_| rng.random::<u8>()).collect();
    let batch = ImageBatch::new(pixels, n, cfg.height, cfg.width)?;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.classes)).collect();
    let opts = GradCheckOptions {
        step: a.step,
        threshold: a.threshold,
        table_grad_scale: if a.corrupt_backward { 1.01 } else { 1.0 },
        ..Default::default()
    };
    let r = gradient_check(&model, &tables, &batch, &labels, &opts)?;
    let verdict = if r.passed() { "PASS" } else { "FAIL" };
    let stdout = format!(
        "parameters: {total}\nweights: max-relative-error={:.3e} checked={}\ntables: max-relative-error={:.3e} checked={}\nthreshold: {:.0e}\n{verdict}\n",
        r.weight_error, r.weights_checked, r.table_error, r.tables_checked, r.threshold
    );
    Ok(Outcome {
        stdout,
        code: if r.passed() { 0 } else { 1 },
    })
}

pub fn cmd_cost(a: &CostArgs) -> Result<Outcome> {
    let table = match a.cmp_rate {
        Some(c) => TableKind::Compressed { cmp_rate: c },
        None => TableKind::Full { dim: a.u },
    }
    .validate()?;
    if a.s == 0 {
        return Err(bad("s", "stride must be positive"));
    }
    let report = CostReport::new(CostAssumptions {
        m: a.m,
        n: a.n,
        s: a.s,
        k: a.k,
        j: a.j,
        table,
    });
    Ok(Outcome::ok(if a.machine {
        report.key_values()
    } else {
        format!("{report}\n{}", report.key_values())
    }))
}

pub fn cmd_recode(checkpoint: &Path, cfg: &RunConfig, out: &Path, limit: usize) -> Result<Outcome> {
    let ck = Checkpoint::load(checkpoint)?;
    if !ck.has_tables() {
        return Err(Error::Checkpoint(format!("{} has no table section", checkpoint.display())));
    }
    let tables = ck.tables()?;
    let (_, test) = cfg.load(&cfg.dataset)?;
    let n = limit.min(test.len());
    let (batch, labels) = test.batch(&(0..n).collect::<Vec<_>>());
    let mut subset = LabeledImageSet::new(test.name(), test.classes(), test.height(), test.width());
    for (i, &l) in labels.iter().enumerate() {
        subset.push(batch.image(i), l)?;
    }
    let files = write_recoded(&tables, &subset, out)?;
    Ok(Outcome::ok(format!("wrote {} files to {}\n", files.len(), out.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nepochs = 3\nfilters=8,8\nalternation=epoch\nlr-g=0.5\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.filters, vec![8, 8]);
        let mut back = RunConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back, c);

        let e = RunConfig::default().apply_text("epochz=3").unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        let e = RunConfig::default().apply_text("lr=fast").unwrap_err();
        assert!(e.to_string().contains("lr"), "{e}");
        let mut c = RunConfig::default();
        c.set("cmp-rate", "300").unwrap();
        c.set("table", "compressed").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("cmp-rate"));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        fs::write(&p, "epochs=7\nseed=3\n").unwrap();
        let args = RunArgs {
            config: Some(p),
            seed: Some(9),
            baseline: true,
            ..Default::default()
        };
        let c = args.resolve(None).unwrap();
        assert_eq!((c.epochs, c.seed, c.table), (7, 9, TableChoice::Baseline));
    }

    #[test]
    fn cost_examples() {
        let parse = |args: &[&str]| {
            let mut full = vec!["lvnet", "cost"];
            full.extend(args);
            run(Cli::try_parse_from(full).unwrap()).unwrap().stdout
        };
        assert!(parse(&["--u", "1", "--k", "3", "--j", "16"]).contains("extra-parameters: 768"));
        assert!(parse(&["--cmp-rate", "16"]).contains("bits-per-pixel: 12"));
        assert!(parse(&["--u", "2", "--m", "32", "--n", "32", "--s", "1", "--k", "3", "--j", "16"])
            .contains("extra-flops: 887808"));
    }

    #[test]
    fn cifar_without_dir_names_dataset() {
        let c = RunConfig {
            dataset: "cifar10:/nonexistent/dir".into(),
            ..Default::default()
        };
        assert!(c.load(&c.dataset).unwrap_err().to_string().contains("dataset"));
    }
}
