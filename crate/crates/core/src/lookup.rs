//! Per-channel color lookup tables.
//!
//! Every 8-bit color value of each RGB channel indexes a learnable row.
//! Full tables hold a `u`-vector per color, so a `[3,H,W]` byte image turns
//! into a `[3u,H,W]` real tensor laid out as planes
//! `R_0..R_{u-1}, G_0..G_{u-1}, B_0..B_{u-1}`. Compressed tables share one
//! scalar between every `c` consecutive colors (`color / c` buckets).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::gradcore::{scatter_add, Graph, NodeId, Tensor};

pub const CHANNELS: usize = 3;
pub const COLORS: usize = 256;

/// Bucket of `color` under CMP-Rate `cmp_rate`.
pub fn compressed_index(color: i64, cmp_rate: usize) -> Result<usize> {
    if !(1..=COLORS).contains(&cmp_rate) {
        return Err(Error::InvalidCmpRate(cmp_rate));
    }
    if !(0..COLORS as i64).contains(&color) {
        return Err(Error::ColorOutOfRange(color));
    }
    Ok(color as usize / cmp_rate)
}

/// Number of buckets per channel, `ceil(256 / c)`.
pub fn bucket_count(cmp_rate: usize) -> usize {
    COLORS.div_ceil(cmp_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Full { dim: usize },
    Compressed { cmp_rate: usize },
}

impl TableKind {
    pub fn validate(self) -> Result<Self> {
        match self {
            TableKind::Full { dim: 0 } => Err(Error::InvalidConfig(
                "full table vector dimension must be >= 1".into(),
            )),
            TableKind::Compressed { cmp_rate } if !(1..=COLORS).contains(&cmp_rate) => {
                Err(Error::InvalidCmpRate(cmp_rate))
            }
            k => Ok(k),
        }
    }

    /// Values per table row (`u`, or 1 for compressed tables).
    pub fn dim(self) -> usize {
        match self {
            TableKind::Full { dim } => dim,
            TableKind::Compressed { .. } => 1,
        }
    }

    pub fn rows(self) -> usize {
        match self {
            TableKind::Full { .. } => COLORS,
            TableKind::Compressed { cmp_rate } => bucket_count(cmp_rate),
        }
    }

    pub fn output_channels(self) -> usize {
        CHANNELS * self.dim()
    }

    pub fn entry_shape(self) -> Vec<usize> {
        match self {
            TableKind::Full { dim } => vec![CHANNELS, COLORS, dim],
            TableKind::Compressed { cmp_rate } => vec![CHANNELS, bucket_count(cmp_rate)],
        }
    }

    fn row(self, color: u8) -> usize {
        match self {
            TableKind::Full { .. } => color as usize,
            TableKind::Compressed { cmp_rate } => color as usize / cmp_rate,
        }
    }
}

/// Three per-channel tables of learnable entries, either full or compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTables {
    kind: TableKind,
    entries: Tensor,
}

/// Output of [`LookupTables::lookup`]: the coded batch plus the flat entry
/// index behind every output value, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LookupResult {
    pub values: Tensor,
    pub indices: Vec<usize>,
}

impl LookupTables {
    /// Entries drawn i.i.d. uniform on `[-1, 1]`.
    pub fn init(kind: TableKind, seed: u64) -> Result<Self> {
        let kind = kind.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = Tensor::from_fn(kind.entry_shape(), |_| rng.random_range(-1.0..=1.0));
        Ok(Self { kind, entries })
    }

    /// Tables with entry `(channel, row, component)` set by `f`.
    pub fn from_fn(kind: TableKind, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let kind = kind.validate()?;
        let (rows, dim) = (kind.rows(), kind.dim());
        let entries = Tensor::from_fn(kind.entry_shape(), |i| {
            f(i / (rows * dim), (i / dim) % rows, i % dim)
        });
        Ok(Self { kind, entries })
    }

    pub fn from_entries(kind: TableKind, entries: Tensor) -> Result<Self> {
        let kind = kind.validate()?;
        if entries.shape() != kind.entry_shape() {
            return Err(Error::ShapeMismatch {
                op: "lookup tables",
                left: entries.shape().to_vec(),
                right: kind.entry_shape(),
            });
        }
        Ok(Self { kind, entries })
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn output_channels(&self) -> usize {
        self.kind.output_channels()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Tensor {
        &mut self.entries
    }

    pub fn param_count(&self) -> usize {
        self.entries.len()
    }

    /// Entry `(channel, row, component)`.
    pub fn get(&self, channel: usize, row: usize, component: usize) -> f64 {
        let (rows, dim) = (self.kind.rows(), self.kind.dim());
        self.entries.data()[(channel * rows + row) * dim + component]
    }

    /// Codes a batch of byte images into `[N, 3u, H, W]`.
    pub fn lookup(&self, batch: &ImageBatch) -> LookupResult {
        let indices = self.indices(batch);
        let values = self.entries.data();
        let shape = vec![batch.len(), self.output_channels(), batch.height(), batch.width()];
        LookupResult {
            values: Tensor::new(shape, indices.iter().map(|&i| values[i]).collect())
                .expect("index count matches output shape"),
            indices,
        }
    }

    /// Flat entry index for every output element, in output order.
    pub fn indices(&self, batch: &ImageBatch) -> Vec<usize> {
        let (rows, dim) = (self.kind.rows(), self.kind.dim());
        let plane = batch.height() * batch.width();
        let pixels = batch.pixels();
        let mut out = Vec::with_capacity(batch.len() * CHANNELS * dim * plane);
        for img in 0..batch.len() {
            for ch in 0..CHANNELS {
                let src = &pixels[(img * CHANNELS + ch) * plane..(img * CHANNELS + ch + 1) * plane];
                let base = ch * rows;
                for d in 0..dim {
                    out.extend(src.iter().map(|&c| (base + self.kind.row(c)) * dim + d));
                }
            }
        }
        out
    }

    /// Scatter-add of an upstream gradient back onto table entries.
    pub fn lookup_backward(&self, upstream: &Tensor, result: &LookupResult) -> Result<Tensor> {
        if upstream.shape() != result.values.shape() {
            return Err(Error::ShapeMismatch {
                op: "lookup_backward",
                left: upstream.shape().to_vec(),
                right: result.values.shape().to_vec(),
            });
        }
        Ok(scatter_add(upstream.data(), &result.indices, self.kind.entry_shape()))
    }

    /// Records the lookup on `graph`. Returns `(table node, coded batch node)`;
    /// frozen tables enter as constants and receive no gradient.
    pub fn attach(&self, graph: &mut Graph, batch: &ImageBatch, frozen: bool) -> Result<(NodeId, NodeId)> {
        let table = if frozen {
            graph.input(self.entries.clone())
        } else {
            graph.param(self.entries.clone())
        };
        let shape = vec![batch.len(), self.output_channels(), batch.height(), batch.width()];
        let out = graph.gather(table, self.indices(batch), shape)?;
        Ok((table, out))
    }
}
