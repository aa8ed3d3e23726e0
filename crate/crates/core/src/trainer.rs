//! SGD-with-momentum training of network weights and lookup tables.
//!
//! Three strategies are provided:
//! * [`train_single`]: one network, its input stage updated with the same
//!   learning rate as its weights;
//! * [`train_cross_network`]: two networks on one task sharing tables,
//!   alternating optimizer steps;
//! * [`train_cross_task`]: as above, each network on its own task.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{AugmentSpec, BatchIter, ImageBatch, LabeledImageSet};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, NodeId, Tensor};
use crate::lookup::LookupTables;
use crate::network::{Model, Standardization};

/// Name under which table velocities are kept.
pub const TABLES_PARAM: &str = "tables";

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Divide by `divisor` at each listed epoch.
    Milestones { epochs: Vec<usize>, divisor: f64 },
    /// Divide by `divisor` after every `period` epochs.
    Every { period: usize, divisor: f64 },
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Milestones { epochs, divisor } => {
                divisor.powi(epochs.iter().filter(|&&m| epoch >= m).count() as i32).recip()
            }
            LrSchedule::Every { period, divisor } if *period > 0 => {
                divisor.powi((epoch / period) as i32).recip()
            }
            LrSchedule::Every { .. } => 1.0,
        }
    }
}

/// Optimizer hyper-parameters and per-parameter velocity buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to table entries as well (off by default).
    pub decay_tables: bool,
    pub schedule: LrSchedule,
    epoch: usize,
    velocities: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            decay_tables: false,
            schedule: LrSchedule::Constant,
            epoch: 0,
            velocities: BTreeMap::new(),
        }
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.schedule.factor(self.epoch)
    }

    pub fn velocities(&self) -> &BTreeMap<String, Tensor> {
        &self.velocities
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Tensor) {
        self.velocities.insert(name.into(), v);
    }

    /// `v <- mu v + (g + wd p); p <- p - lr v`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, decay: bool) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let lr = self.current_lr();
        let (mu, wd) = (self.momentum, if decay { self.weight_decay } else { 0.0 });
        let v = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        if v.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd velocity",
                left: v.shape().to_vec(),
                right: param.shape().to_vec(),
            });
        }
        for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *v = mu * *v + (g + wd * *p);
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// One optimizer step over a model's parameters and (optionally) tables.
pub fn sgd_step(model: &mut Model, tables: Option<(&mut LookupTables, &Tensor)>, optim: &mut OptimState) -> Result<()> {
    let (params, grads) = model.params_and_grads();
    for (p, g) in params.iter_mut().zip(grads) {
        optim.update(&p.name, &mut p.value, g, true)?;
    }
    if let Some((t, g)) = tables {
        let decay = optim.decay_tables;
        optim.update(TABLES_PARAM, t.entries_mut(), g, decay)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternation {
    /// Each network takes this many mini-batch steps per turn.
    Steps(usize),
    /// Each network takes a whole epoch per turn.
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alternation: Alternation,
    pub freeze_tables: bool,
    pub augment: Option<AugmentSpec>,
}

impl TrainPlan {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            seed,
            alternation: Alternation::Steps(1),
            freeze_tables: false,
            augment: None,
        }
    }
}

/// How a network's byte inputs become real tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum InputStage {
    Standardized(Standardization),
    Lookup(LookupTables),
}

impl InputStage {
    pub fn tables(&self) -> Option<&LookupTables> {
        match self {
            InputStage::Lookup(t) => Some(t),
            InputStage::Standardized(_) => None,
        }
    }

    pub fn output_channels(&self) -> usize {
        match self {
            InputStage::Lookup(t) => t.output_channels(),
            InputStage::Standardized(_) => 3,
        }
    }
}

enum StageMut<'a> {
    Standardized(&'a Standardization),
    Lookup(&'a mut LookupTables),
}

#[derive(Clone, Copy)]
enum StageRef<'a> {
    Standardized(&'a Standardization),
    Lookup(&'a LookupTables),
}

impl StageMut<'_> {
    fn as_ref(&self) -> StageRef<'_> {
        match self {
            StageMut::Standardized(s) => StageRef::Standardized(s),
            StageMut::Lookup(t) => StageRef::Lookup(t),
        }
    }
}

impl<'a> From<&'a InputStage> for StageRef<'a> {
    fn from(s: &'a InputStage) -> Self {
        match s {
            InputStage::Standardized(st) => StageRef::Standardized(st),
            InputStage::Lookup(t) => StageRef::Lookup(t),
        }
    }
}

impl<'a> From<&'a mut InputStage> for StageMut<'a> {
    fn from(s: &'a mut InputStage) -> Self {
        match s {
            InputStage::Standardized(st) => StageMut::Standardized(st),
            InputStage::Lookup(t) => StageMut::Lookup(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.last().and_then(|e| e.test_accuracy)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.last().map(|e| e.train_accuracy)
    }

    /// Appends CSV rows (`epoch,split,loss,accuracy,seconds`) to `out`.
    /// `split` is prefixed by `tag` when it is non-empty.
    pub fn write_csv_rows(&self, tag: &str, include_time: bool, out: &mut String) {
        let split = |s: &str| if tag.is_empty() { s.to_string() } else { format!("{s}_{tag}") };
        for e in &self.epochs {
            let secs = if include_time { e.seconds } else { 0.0 };
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.3}", e.epoch, split("train"), e.train_loss, e.train_accuracy, secs);
            if let (Some(l), Some(a)) = (e.test_loss, e.test_accuracy) {
                let _ = writeln!(out, "{},{},{:.6},{:.6},{:.3}", e.epoch, split("test"), l, a, secs);
            }
        }
    }
}

pub const CSV_HEADER: &str = "epoch,split,loss,accuracy,seconds";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Tally {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl Tally {
    fn add(&mut self, loss: f64, correct: usize, n: usize) {
        self.loss += loss * n as f64;
        self.correct += correct;
        self.seen += n;
    }

    fn loss(&self) -> f64 {
        self.loss / self.seen.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.seen.max(1) as f64
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Records the input stage and network on a fresh graph.
fn record(
    graph: &mut Graph,
    model: &Model,
    stage: StageRef<'_>,
    batch: &ImageBatch,
    frozen: bool,
) -> Result<(NodeId, Vec<NodeId>, Option<NodeId>)> {
    let (input, table) = match stage {
        StageRef::Standardized(s) => (graph.input(s.apply(batch)?), None),
        StageRef::Lookup(t) => {
            if t.output_channels() != model.config().input_channels {
                return Err(Error::ShapeMismatch {
                    op: "input stage",
                    left: vec![t.output_channels()],
                    right: vec![model.config().input_channels],
                });
            }
            let (tn, x) = t.attach(graph, batch, frozen)?;
            (x, (!frozen).then_some(tn))
        }
    };
    let (logits, ids) = model.forward_graph(graph, input)?;
    Ok((logits, ids, table))
}

/// Forward, backward and one SGD step. Returns `(loss, correct)`.
fn train_step(
    model: &mut Model,
    stage: &mut StageMut<'_>,
    batch: &ImageBatch,
    labels: &[usize],
    optim: &mut OptimState,
    frozen: bool,
    at: (usize, usize),
) -> Result<(f64, usize)> {
    let mut graph = Graph::new();
    let (logits, ids, table) = record(&mut graph, model, stage.as_ref(), batch, frozen)?;
    let loss_node = graph.softmax_cross_entropy(logits, labels)?;
    let loss = graph.value(loss_node).item().expect("scalar");
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss,
            epoch: at.0,
            step: at.1,
        });
    }
    let correct = count_correct(graph.value(logits), labels);
    let mut grads = graph.backward(loss_node)?;
    let model_grads = ids.iter().map(|&id| grads.take(id).expect("param leaf")).collect();
    model.set_grads(model_grads)?;
    let table_grad = table.map(|id| grads.take(id).expect("table leaf"));
    let tables = match (stage, &table_grad) {
        (StageMut::Lookup(t), Some(g)) => Some((&mut **t, g)),
        _ => None,
    };
    sgd_step(model, tables, optim)?;
    Ok((loss, correct))
}

fn evaluate_stage(model: &Model, stage: StageRef<'_>, set: &LabeledImageSet) -> Result<(f64, f64)> {
    const CHUNK: usize = 250;
    let mut tally = Tally::default();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (batch, labels) = set.batch(chunk);
        let mut graph = Graph::new();
        let (logits, _, _) = record(&mut graph, model, stage, &batch, true)?;
        let loss = graph.softmax_cross_entropy(logits, &labels)?;
        tally.add(
            graph.value(loss).item().expect("scalar"),
            count_correct(graph.value(logits), &labels),
            labels.len(),
        );
    }
    Ok((tally.loss(), tally.accuracy()))
}

/// Single-view accuracy (argmax of logits) on unaugmented images.
pub fn evaluate(model: &Model, stage: &InputStage, set: &LabeledImageSet) -> Result<f64> {
    Ok(evaluate_with_loss(model, stage, set)?.1)
}

/// `(mean cross-entropy, accuracy)` on unaugmented images.
pub fn evaluate_with_loss(model: &Model, stage: &InputStage, set: &LabeledImageSet) -> Result<(f64, f64)> {
    evaluate_stage(model, stage.into(), set)
}

/// Class predicted for every item of `set`.
pub fn predict(model: &Model, stage: &InputStage, set: &LabeledImageSet) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(250) {
        let (batch, _) = set.batch(chunk);
        let input = match stage {
            InputStage::Standardized(s) => s.apply(&batch)?,
            InputStage::Lookup(t) => t.lookup(&batch).values,
        };
        let logits = model.forward(&input)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

fn batches<'a>(set: &'a LabeledImageSet, plan: &TrainPlan, epoch: usize) -> BatchIter<'a> {
    let it = BatchIter::new(set, plan.batch_size, plan.seed, epoch as u64);
    match plan.augment {
        Some(spec) => it.with_augment(spec, plan.seed, epoch as u64),
        None => it,
    }
}

/// Joint training of `model` and its input stage on `train`.
pub fn train_single(
    model: &mut Model,
    stage: &mut InputStage,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    plan: &TrainPlan,
    optim: &mut OptimState,
) -> Result<Metrics> {
    if stage.output_channels() != model.config().input_channels {
        return Err(Error::ShapeMismatch {
            op: "input stage",
            left: vec![stage.output_channels()],
            right: vec![model.config().input_channels],
        });
    }
    let mut metrics = Metrics::default();
    let mut stage = StageMut::from(stage);
    for epoch in 0..plan.epochs {
        let start = Instant::now();
        optim.set_epoch(epoch);
        let mut tally = Tally::default();
        for (step, (batch, labels)) in batches(train, plan, epoch).enumerate() {
            let (loss, correct) = train_step(model, &mut stage, &batch, &labels, optim, plan.freeze_tables, (epoch, step))?;
            tally.add(loss, correct, labels.len());
        }
        let (test_loss, test_accuracy) = match test {
            Some(t) => {
                let (l, a) = evaluate_stage(model, stage.as_ref(), t)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss: tally.loss(),
            train_accuracy: tally.accuracy(),
            test_loss,
            test_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    F,
    G,
}

/// Parameter movement caused by one alternation step, reported when an
/// observer is attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub network: Network,
    pub delta_f: f64,
    pub delta_g: f64,
    pub delta_tables: f64,
}

pub type StepObserver<'a> = &'a mut dyn FnMut(&StepRecord);

fn distance(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn snapshot(m: &Model) -> Vec<Tensor> {
    m.params().iter().map(|p| p.value.clone()).collect()
}

struct Side<'m, 'd> {
    model: &'m mut Model,
    optim: &'m mut OptimState,
    train: &'d LabeledImageSet,
    test: Option<&'d LabeledImageSet>,
}

/// Shared alternation loop. Each network walks its own batch stream; turns
/// alternate F then G until both streams are exhausted for the epoch.
#[allow(clippy::too_many_arguments)]
fn train_alternating(
    f: Side<'_, '_>,
    g: Side<'_, '_>,
    tables: &mut LookupTables,
    plan: &TrainPlan,
    mut observer: Option<StepObserver<'_>>,
) -> Result<(Metrics, Metrics)> {
    for side in [&f, &g] {
        if side.model.config().input_channels != tables.output_channels() {
            return Err(Error::ShapeMismatch {
                op: "shared tables",
                left: vec![tables.output_channels()],
                right: vec![side.model.config().input_channels],
            });
        }
    }
    let turn = match plan.alternation {
        Alternation::Steps(n) => n.max(1),
        Alternation::Epoch => usize::MAX,
    };
    let Side { model: fm, optim: fo, train: ftrain, test: ftest } = f;
    let Side { model: gm, optim: go, train: gtrain, test: gtest } = g;
    let (mut mf, mut mg) = (Metrics::default(), Metrics::default());

    for epoch in 0..plan.epochs {
        let start = Instant::now();
        fo.set_epoch(epoch);
        go.set_epoch(epoch);
        let mut fb = batches(ftrain, plan, epoch).peekable();
        let mut gb = batches(gtrain, plan, epoch).peekable();
        let (mut tf, mut tg) = (Tally::default(), Tally::default());
        let mut step = 0;
        while fb.peek().is_some() || gb.peek().is_some() {
            for (net, it) in [(Network::F, &mut fb), (Network::G, &mut gb)] {
                for _ in 0..turn {
                    let Some((batch, labels)) = it.next() else { break };
                    let before = observer.is_some().then(|| (snapshot(fm), snapshot(gm), tables.entries().clone()));
                    let mut stage = StageMut::Lookup(&mut *tables);
                    let (model, optim, tally) = match net {
                        Network::F => (&mut *fm, &mut *fo, &mut tf),
                        Network::G => (&mut *gm, &mut *go, &mut tg),
                    };
                    let (loss, correct) = train_step(model, &mut stage, &batch, &labels, optim, plan.freeze_tables, (epoch, step))?;
                    tally.add(loss, correct, labels.len());
                    if let (Some(obs), Some((bf, bg, bt))) = (observer.as_mut(), before) {
                        obs(&StepRecord {
                            epoch,
                            step,
                            network: net,
                            delta_f: distance(&bf, &snapshot(fm)),
                            delta_g: distance(&bg, &snapshot(gm)),
                            delta_tables: distance(std::slice::from_ref(&bt), std::slice::from_ref(tables.entries())),
                        });
                    }
                    step += 1;
                }
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        for (model, test, tally, metrics) in [(&*fm, ftest, tf, &mut mf), (&*gm, gtest, tg, &mut mg)] {
            let (test_loss, test_accuracy) = match test {
                Some(t) => {
                    let (l, a) = evaluate_stage(model, StageRef::Lookup(tables), t)?;
                    (Some(l), Some(a))
                }
                None => (None, None),
            };
            metrics.epochs.push(EpochMetrics {
                epoch,
                train_loss: tally.loss(),
                train_accuracy: tally.accuracy(),
                test_loss,
                test_accuracy,
                seconds,
            });
        }
    }
    Ok((mf, mg))
}

/// Two networks on one task with shared tables: alternating steps on the
/// same mini-batch sequence, each updating its own weights and the tables.
#[allow(clippy::too_many_arguments)]
pub fn train_cross_network(
    model_f: &mut Model,
    model_g: &mut Model,
    tables: &mut LookupTables,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    plan: &TrainPlan,
    optim_f: &mut OptimState,
    optim_g: &mut OptimState,
    observer: Option<StepObserver<'_>>,
) -> Result<(Metrics, Metrics)> {
    train_alternating(
        Side { model: model_f, optim: optim_f, train, test },
        Side { model: model_g, optim: optim_g, train, test },
        tables,
        plan,
        observer,
    )
}

/// Two networks on two tasks with shared tables: `model_f` on task p,
/// `model_g` on task q, alternating steps.
#[allow(clippy::too_many_arguments)]
pub fn train_cross_task(
    model_f: &mut Model,
    model_g: &mut Model,
    tables: &mut LookupTables,
    (train_p, test_p): (&LabeledImageSet, Option<&LabeledImageSet>),
    (train_q, test_q): (&LabeledImageSet, Option<&LabeledImageSet>),
    plan: &TrainPlan,
    optim_f: &mut OptimState,
    optim_g: &mut OptimState,
    observer: Option<StepObserver<'_>>,
) -> Result<(Metrics, Metrics)> {
    train_alternating(
        Side { model: model_f, optim: optim_f, train: train_p, test: test_p },
        Side { model: model_g, optim: optim_g, train: train_q, test: test_q },
        tables,
        plan,
        observer,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::lookup::TableKind;
    use crate::network::{ConvBlock, ModelConfig};

    fn cfg(input_channels: usize, classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            input_channels,
            height: 8,
            width: 8,
            conv_blocks: vec![ConvBlock::new(3, 8, 1, true), ConvBlock::new(3, 8, 1, true)],
            head_width: 16,
            classes,
            seed,
        }
    }

    #[test]
    fn plain_sgd_and_fixed_point() {
        let mut o = OptimState::new(0.5, 0.0, 0.0);
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        o.update("p", &mut p, &Tensor::new(vec![2], vec![0.2, -0.4]).unwrap(), true).unwrap();
        assert_eq!(p.data(), &[0.9, 2.2]);
        o.update("p", &mut p, &Tensor::zeros(vec![2]), true).unwrap();
        assert_eq!(p.data(), &[0.9, 2.2]);
    }

    #[test]
    fn momentum_two_steps() {
        let (lr, g) = (0.1, 0.5);
        let mut o = OptimState::new(lr, 0.9, 0.0);
        let mut p = Tensor::scalar(3.0);
        let grad = Tensor::scalar(g);
        o.update("p", &mut p, &grad, true).unwrap();
        o.update("p", &mut p, &grad, true).unwrap();
        let change = 3.0 - p.data()[0];
        assert!((change - lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_tables_by_default() {
        let mut o = OptimState::new(1.0, 0.0, 0.5);
        let mut p = Tensor::scalar(2.0);
        o.update("w", &mut p, &Tensor::scalar(0.0), true).unwrap();
        assert_eq!(p.data(), &[1.0]);
        let mut t = Tensor::scalar(2.0);
        o.update(TABLES_PARAM, &mut t, &Tensor::scalar(0.0), o.decay_tables).unwrap();
        assert_eq!(t.data(), &[2.0]);
    }

    #[test]
    fn schedules() {
        let m = LrSchedule::Milestones { epochs: vec![2, 5], divisor: 10.0 };
        assert_eq!(m.factor(1), 1.0);
        assert_eq!(m.factor(2), 0.1);
        assert!((m.factor(7) - 0.01).abs() < 1e-15);
        let e = LrSchedule::Every { period: 20, divisor: 2.0 };
        assert_eq!(e.factor(19), 1.0);
        assert_eq!(e.factor(40), 0.25);
    }

    #[test]
    fn zero_lr_is_noop() {
        let data = make_synthetic(SyntheticKind::Separable, 8, 2, 8, 8, 0).unwrap();
        let mut model = Model::build(cfg(3, 2, 0)).unwrap();
        let tables = LookupTables::init(TableKind::Full { dim: 1 }, 0).unwrap();
        let mut stage = InputStage::Lookup(tables.clone());
        let before = model.clone();
        let mut optim = OptimState::new(0.0, 0.9, 5e-4);
        train_single(&mut model, &mut stage, &data, None, &TrainPlan::new(1, 4, 0), &mut optim).unwrap();
        assert_eq!(model.params(), before.params());
        assert_eq!(stage.tables().unwrap(), &tables);
    }

    #[test]
    fn tables_change_only_for_present_colors() {
        // one image per class, colors from two disjoint bands
        let data = make_synthetic(SyntheticKind::Separable, 1, 2, 8, 8, 3).unwrap();
        let mut model = Model::build(cfg(3, 2, 1)).unwrap();
        let tables = LookupTables::init(TableKind::Full { dim: 1 }, 1).unwrap();
        let mut stage = InputStage::Lookup(tables.clone());
        let mut optim = OptimState::new(0.1, 0.0, 0.0);
        train_single(&mut model, &mut stage, &data, None, &TrainPlan::new(1, 2, 0), &mut optim).unwrap();
        let after = stage.tables().unwrap();
        for ch in 0..3 {
            let present: std::collections::BTreeSet<usize> = (0..data.len())
                .flat_map(|i| data.image(i)[ch * 64..(ch + 1) * 64].iter().map(|&c| c as usize))
                .collect();
            for v in 0..256 {
                let moved = after.get(ch, v, 0) != tables.get(ch, v, 0);
                assert_eq!(moved, present.contains(&v), "channel {ch} color {v}");
            }
        }
    }

    #[test]
    fn frozen_tables_stay_put() {
        let data = make_synthetic(SyntheticKind::Separable, 4, 2, 8, 8, 0).unwrap();
        let mut model = Model::build(cfg(6, 2, 0)).unwrap();
        let tables = LookupTables::init(TableKind::Full { dim: 2 }, 4).unwrap();
        let mut stage = InputStage::Lookup(tables.clone());
        let mut plan = TrainPlan::new(2, 4, 0);
        plan.freeze_tables = true;
        let before = model.clone();
        train_single(&mut model, &mut stage, &data, None, &plan, &mut OptimState::new(0.05, 0.9, 0.0)).unwrap();
        assert_eq!(stage.tables().unwrap(), &tables);
        assert_ne!(model.params(), before.params());
    }

    #[test]
    fn nan_watchdog() {
        let data = make_synthetic(SyntheticKind::Separable, 4, 2, 8, 8, 0).unwrap();
        let mut model = Model::build(cfg(3, 2, 0)).unwrap();
        model.param_mut("fc1.bias").unwrap().data_mut()[0] = f64::NAN;
        let mut stage = InputStage::Lookup(LookupTables::init(TableKind::Full { dim: 1 }, 0).unwrap());
        let err = train_single(&mut model, &mut stage, &data, None, &TrainPlan::new(1, 4, 0), &mut OptimState::new(0.1, 0.0, 0.0));
        assert!(matches!(err, Err(Error::NonFiniteLoss { epoch: 0, step: 0, .. })));
    }

    #[test]
    fn cross_network_isolation_and_zero_lr() {
        let data = make_synthetic(SyntheticKind::Separable, 4, 2, 8, 8, 0).unwrap();
        let mut f = Model::build(cfg(3, 2, 1)).unwrap();
        let mut g = Model::build(cfg(3, 2, 2)).unwrap();
        let mut tables = LookupTables::init(TableKind::Full { dim: 1 }, 0).unwrap();
        let g0 = g.clone();
        let mut records = Vec::new();
        let mut obs = |r: &StepRecord| records.push(*r);
        train_cross_network(
            &mut f,
            &mut g,
            &mut tables,
            &data,
            None,
            &TrainPlan::new(1, 4, 0),
            &mut OptimState::new(0.05, 0.9, 0.0),
            &mut OptimState::new(0.0, 0.9, 0.0),
            Some(&mut obs),
        )
        .unwrap();
        assert_eq!(g.params(), g0.params());
        assert_eq!(records.len(), 4);
        for r in &records {
            match r.network {
                Network::F => assert_eq!(r.delta_g, 0.0),
                Network::G => assert_eq!(r.delta_f, 0.0),
            }
        }
    }

    #[test]
    fn cross_network_noop_with_zero_lr() {
        let data = make_synthetic(SyntheticKind::Separable, 2, 2, 8, 8, 0).unwrap();
        let mut f = Model::build(cfg(3, 2, 1)).unwrap();
        let mut g = Model::build(cfg(3, 2, 2)).unwrap();
        let mut tables = LookupTables::init(TableKind::Compressed { cmp_rate: 4 }, 0).unwrap();
        let (f0, g0, t0) = (f.clone(), g.clone(), tables.clone());
        train_cross_network(
            &mut f,
            &mut g,
            &mut tables,
            &data,
            None,
            &TrainPlan::new(1, 4, 0),
            &mut OptimState::new(0.0, 0.9, 0.0),
            &mut OptimState::new(0.0, 0.9, 0.0),
            None,
        )
        .unwrap();
        assert_eq!((f.params(), g.params(), &tables), (f0.params(), g0.params(), &t0));
    }

    #[test]
    fn cross_task_accepts_class_mismatch() {
        let p = make_synthetic(SyntheticKind::Separable, 4, 2, 8, 8, 0).unwrap();
        let q = make_synthetic(SyntheticKind::Separable, 4, 3, 8, 8, 1).unwrap();
        let mut f = Model::build(cfg(3, 2, 1)).unwrap();
        let mut g = Model::build(cfg(3, 3, 2)).unwrap();
        let mut tables = LookupTables::init(TableKind::Full { dim: 1 }, 0).unwrap();
        let (mf, mg) = train_cross_task(
            &mut f,
            &mut g,
            &mut tables,
            (&p, Some(&p)),
            (&q, Some(&q)),
            &TrainPlan::new(1, 4, 0),
            &mut OptimState::new(0.05, 0.9, 0.0),
            &mut OptimState::new(0.05, 0.9, 0.0),
            None,
        )
        .unwrap();
        assert_eq!(mf.epochs.len(), 1);
        assert_eq!(mg.epochs.len(), 1);

        let mut bad = Model::build(cfg(6, 3, 2)).unwrap();
        assert!(train_cross_task(
            &mut f,
            &mut bad,
            &mut tables,
            (&p, None),
            (&q, None),
            &TrainPlan::new(1, 4, 0),
            &mut OptimState::new(0.05, 0.9, 0.0),
            &mut OptimState::new(0.05, 0.9, 0.0),
            None,
        )
        .is_err());
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let data = make_synthetic(SyntheticKind::Separable, 3, 10, 8, 8, 0).unwrap();
        let mut model = Model::build(cfg(3, 10, 0)).unwrap();
        for p in model.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        model.param_mut("fc1.bias").unwrap().data_mut()[4] = 1.0;
        let stage = InputStage::Lookup(LookupTables::init(TableKind::Full { dim: 1 }, 0).unwrap());
        assert!((evaluate(&model, &stage, &data).unwrap() - 0.1).abs() < 1e-15);
    }
}
