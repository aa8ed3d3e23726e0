//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LVNC" | version: u8 | section count: u32
//! section := name length: u32 | name: utf-8 | rank: u32 | dims: u64 * rank
//!            | payload: f64 * product(dims)
//! ```
//!
//! Integer-valued metadata (configs, seeds, counters) is stored as exact
//! `f64` values, which limits seeds to 2^53.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::lookup::{LookupTables, TableKind};
use crate::network::{ChannelStats, ConvBlock, Model, ModelConfig, Standardization};
use crate::trainer::{LrSchedule, OptimState};

pub const MAGIC: &[u8; 4] = b"LVNC";
pub const VERSION: u8 = 1;
const MAX_EXACT: u64 = 1 << 53;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<Section>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn exact(v: u64, what: &str) -> Result<f64> {
    if v > MAX_EXACT {
        return Err(err(format!("{what} {v} exceeds 2^53 and cannot be stored exactly")));
    }
    Ok(v as f64)
}

fn as_usize(v: f64, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v > MAX_EXACT as f64 {
        return Err(err(format!("{what}: {v} is not a non-negative integer")));
    }
    Ok(v as usize)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Adds or replaces a section.
    pub fn put(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.sections.iter_mut().find(|s| s.name == name) {
            Some(s) => s.tensor = tensor,
            None => self.sections.push(Section { name, tensor }),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|s| s.name == name).map(|s| &s.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| err(format!("missing section `{name}`")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.sections.iter().any(|s| s.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.tensor.rank() as u32).to_le_bytes());
            for &d in s.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in s.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic, not an LVNC checkpoint"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| err("section name is not utf-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| err(format!("section `{name}` has an impossible shape {shape:?}")))?;
            let payload = r.take(n * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.sections.push(Section {
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn put_model(&mut self, prefix: &str, model: &Model) -> Result<()> {
        let c = model.config();
        let mut cfg = vec![
            c.input_channels as f64,
            c.height as f64,
            c.width as f64,
            c.head_width as f64,
            c.classes as f64,
            exact(c.seed, "model seed")?,
            c.conv_blocks.len() as f64,
        ];
        for b in &c.conv_blocks {
            cfg.extend([b.kernel as f64, b.filters as f64, b.stride as f64, f64::from(u8::from(b.pool))]);
        }
        let n = cfg.len();
        self.put(format!("{prefix}.config"), Tensor::new(vec![n], cfg)?);
        for p in model.params() {
            self.put(format!("{prefix}.{}", p.name), p.value.clone());
        }
        Ok(())
    }

    pub fn model(&self, prefix: &str) -> Result<Model> {
        let cfg = self.require(&format!("{prefix}.config"))?.data();
        let field = |i: usize, what: &str| -> Result<usize> {
            as_usize(*cfg.get(i).ok_or_else(|| err(format!("{prefix}.config too short")))?, what)
        };
        let blocks = field(6, "block count")?;
        let mut conv_blocks = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let o = 7 + 4 * b;
            conv_blocks.push(ConvBlock::new(
                field(o, "kernel")?,
                field(o + 1, "filters")?,
                field(o + 2, "stride")?,
                field(o + 3, "pool")? != 0,
            ));
        }
        let config = ModelConfig {
            input_channels: field(0, "input channels")?,
            height: field(1, "height")?,
            width: field(2, "width")?,
            conv_blocks,
            head_width: field(3, "head width")?,
            classes: field(4, "classes")?,
            seed: field(5, "seed")? as u64,
        };
        let mut model = Model::build(config)?;
        for p in model.params_mut() {
            let t = self.require(&format!("{prefix}.{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    left: t.shape().to_vec(),
                    right: p.value.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    pub fn put_tables(&mut self, tables: &LookupTables) {
        let kind = match tables.kind() {
            TableKind::Full { dim } => [0.0, dim as f64],
            TableKind::Compressed { cmp_rate } => [1.0, cmp_rate as f64],
        };
        self.put("tables.kind", Tensor::new(vec![2], kind.to_vec()).expect("2"));
        self.put("tables.entries", tables.entries().clone());
    }

    pub fn has_tables(&self) -> bool {
        self.get("tables.kind").is_some()
    }

    pub fn tables(&self) -> Result<LookupTables> {
        let kind = self.require("tables.kind")?.data();
        if kind.len() != 2 {
            return Err(err("tables.kind must hold 2 values"));
        }
        let v = as_usize(kind[1], "table parameter")?;
        let kind = match kind[0] {
            0.0 => TableKind::Full { dim: v },
            1.0 => TableKind::Compressed { cmp_rate: v },
            other => return Err(err(format!("unknown table kind {other}"))),
        };
        LookupTables::from_entries(kind, self.require("tables.entries")?.clone())
    }

    pub fn put_standardization(&mut self, s: &Standardization) {
        let v = match s {
            Standardization::PerImage => vec![0.0; 7],
            Standardization::Dataset(st) => {
                let mut v = vec![1.0];
                v.extend(st.mean);
                v.extend(st.std);
                v
            }
        };
        self.put("standardize", Tensor::new(vec![7], v).expect("7"));
    }

    pub fn standardization(&self) -> Result<Standardization> {
        let v = self.require("standardize")?.data();
        match v {
            [m, ..] if *m == 0.0 => Ok(Standardization::PerImage),
            [m, a, b, c, d, e, f] if *m == 1.0 => Ok(Standardization::Dataset(ChannelStats {
                mean: [*a, *b, *c],
                std: [*d, *e, *f],
            })),
            _ => Err(err("malformed standardize section")),
        }
    }

    pub fn put_optim(&mut self, prefix: &str, o: &OptimState, epoch: usize) {
        let mut hyper = vec![o.lr, o.momentum, o.weight_decay, f64::from(u8::from(o.decay_tables)), epoch as f64];
        match &o.schedule {
            LrSchedule::Constant => hyper.push(0.0),
            LrSchedule::Milestones { epochs, divisor } => {
                hyper.extend([1.0, *divisor]);
                hyper.extend(epochs.iter().map(|&e| e as f64));
            }
            LrSchedule::Every { period, divisor } => hyper.extend([2.0, *period as f64, *divisor]),
        }
        let n = hyper.len();
        self.put(format!("{prefix}.hyper"), Tensor::new(vec![n], hyper).expect("len"));
        for (name, v) in o.velocities() {
            self.put(format!("{prefix}.velocity.{name}"), v.clone());
        }
    }

    pub fn optim(&self, prefix: &str) -> Result<OptimState> {
        let h = self.require(&format!("{prefix}.hyper"))?.data();
        if h.len() < 6 {
            return Err(err(format!("{prefix}.hyper too short")));
        }
        let schedule = match h[5] {
            0.0 => LrSchedule::Constant,
            1.0 if h.len() >= 7 => LrSchedule::Milestones {
                divisor: h[6],
                epochs: h[7..].iter().map(|&e| as_usize(e, "milestone")).collect::<Result<_>>()?,
            },
            2.0 if h.len() == 8 => LrSchedule::Every {
                period: as_usize(h[6], "period")?,
                divisor: h[7],
            },
            _ => return Err(err(format!("{prefix}.hyper: unknown schedule"))),
        };
        let mut o = OptimState::new(h[0], h[1], h[2]).with_schedule(schedule);
        o.decay_tables = h[3] != 0.0;
        o.set_epoch(as_usize(h[4], "epoch")?);
        let vp = format!("{prefix}.velocity.");
        for s in &self.sections {
            if let Some(name) = s.name.strip_prefix(&vp) {
                o.set_velocity(name, s.tensor.clone());
            }
        }
        Ok(o)
    }

    /// Seed and completed-epoch counter; batch order and augmentation are
    /// pure functions of these.
    pub fn put_rng(&mut self, seed: u64, epochs_done: usize) -> Result<()> {
        let v = vec![exact(seed, "seed")?, epochs_done as f64];
        self.put("rng.state", Tensor::new(vec![2], v)?);
        Ok(())
    }

    pub fn rng(&self) -> Result<(u64, usize)> {
        let v = self.require("rng.state")?.data();
        if v.len() != 2 {
            return Err(err("rng.state must hold 2 values"));
        }
        Ok((as_usize(v[0], "seed")? as u64, as_usize(v[1], "epochs")?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model() -> Model {
        Model::build(ModelConfig {
            input_channels: 6,
            height: 8,
            width: 8,
            conv_blocks: vec![ConvBlock::new(3, 4, 1, true), ConvBlock::new(5, 3, 2, false)],
            head_width: 5,
            classes: 3,
            seed: 42,
        })
        .unwrap()
    }

    #[test]
    fn header_bytes() {
        let mut ck = Checkpoint::new();
        ck.put("a", Tensor::scalar(1.5));
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"LVNC");
        assert_eq!(b[4], VERSION);
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(b[13], b'a');
        assert_eq!(&b[b.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn model_tables_optim_roundtrip() {
        let m = model();
        let t = LookupTables::init(TableKind::Full { dim: 2 }, 3).unwrap();
        let mut o = OptimState::new(0.1, 0.9, 5e-4).with_schedule(LrSchedule::Milestones {
            epochs: vec![3, 7],
            divisor: 2.0,
        });
        o.set_velocity("conv0.weight", Tensor::filled(vec![4, 6, 3, 3], 0.25));
        let mut ck = Checkpoint::new();
        ck.put_model("model", &m).unwrap();
        ck.put_tables(&t);
        ck.put_optim("optim", &o, 4);
        ck.put_rng(17, 4).unwrap();
        ck.put_standardization(&Standardization::PerImage);

        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model("model").unwrap(), m);
        assert_eq!(back.tables().unwrap(), t);
        let mut o4 = o.clone();
        o4.set_epoch(4);
        assert_eq!(back.optim("optim").unwrap(), o4);
        assert_eq!(back.rng().unwrap(), (17, 4));
        assert_eq!(back.standardization().unwrap(), Standardization::PerImage);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0").is_err());
        let mut ck = Checkpoint::new();
        ck.put("x", Tensor::zeros(vec![3]));
        let mut b = ck.to_bytes();
        b.pop();
        assert!(Checkpoint::from_bytes(&b).is_err());
        assert!(Checkpoint::new().tables().is_err());
        assert!(Checkpoint::new().put_rng(u64::MAX, 0).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_sections_roundtrip(
            secs in proptest::collection::vec(
                ("[a-z.]{1,12}", proptest::collection::vec(-1e6f64..1e6, 0..20)),
                0..6,
            )
        ) {
            let mut ck = Checkpoint::new();
            for (name, data) in secs {
                let n = data.len();
                ck.put(name, Tensor::new(vec![n], data).unwrap());
            }
            prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
        }
    }
}
