//! Extra space and compute of a lookup network over its plain counterpart,
//! and storage bits per pixel under color compression.

use std::fmt;

use crate::lookup::{bucket_count, TableKind, CHANNELS, COLORS};

/// Extra learnable scalars for full tables of dimension `u` in front of a
/// first conv layer with `j` kernels of size `k x k`:
/// `256*3*u + k*k*3*(u-1)*j`.
pub fn extra_params(u: u64, k: u64, j: u64) -> u64 {
    (COLORS * CHANNELS) as u64 * u + k * k * CHANNELS as u64 * (u - 1) * j
}

/// Extra floating-point work for an `m x n` input, first-layer stride `s`
/// and same padding: `m*n*3` lookups plus the widened first convolution,
/// counted as `2*k^2*C + 1` per output element.
pub fn extra_flops(m: u64, n: u64, s: u64, k: u64, j: u64, u: u64) -> u64 {
    let positions = m.div_ceil(s) * n.div_ceil(s) * j;
    let conv = |channels: u64| positions * (2 * k * k * channels + 1);
    m * n * CHANNELS as u64 + conv(CHANNELS as u64 * u) - conv(CHANNELS as u64)
}

/// Bits needed to store one pixel when each channel keeps `ceil(256/c)`
/// colors; 0 when a channel has a single color.
pub fn pixel_bits(cmp_rate: usize) -> u32 {
    let colors = bucket_count(cmp_rate.clamp(1, COLORS));
    let per_channel = if colors <= 1 {
        0
    } else {
        usize::BITS - (colors - 1).leading_zeros()
    };
    CHANNELS as u32 * per_channel
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostAssumptions {
    pub m: u64,
    pub n: u64,
    pub s: u64,
    pub k: u64,
    pub j: u64,
    pub table: TableKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub extra_parameters: u64,
    pub extra_flops: u64,
    pub bits_per_pixel: u32,
    pub assumptions: CostAssumptions,
}

impl CostReport {
    pub fn new(assumptions: CostAssumptions) -> Self {
        let CostAssumptions { m, n, s, k, j, table } = assumptions;
        let (extra_parameters, extra_flops, bits_per_pixel) = match table {
            TableKind::Full { dim } => {
                let u = dim as u64;
                (extra_params(u, k, j), extra_flops(m, n, s, k, j, u), pixel_bits(1))
            }
            // one scalar per bucket and no change to the first layer
            TableKind::Compressed { cmp_rate } => (
                (CHANNELS * bucket_count(cmp_rate)) as u64,
                extra_flops(m, n, s, k, j, 1),
                pixel_bits(cmp_rate),
            ),
        };
        Self {
            extra_parameters,
            extra_flops,
            bits_per_pixel,
            assumptions,
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let a = &self.assumptions;
        let (u, c) = match a.table {
            TableKind::Full { dim } => (dim.to_string(), "-".to_string()),
            TableKind::Compressed { cmp_rate } => ("1".to_string(), cmp_rate.to_string()),
        };
        vec![
            ("extra-parameters", self.extra_parameters.to_string()),
            ("extra-flops", self.extra_flops.to_string()),
            ("bits-per-pixel", self.bits_per_pixel.to_string()),
            ("m", a.m.to_string()),
            ("n", a.n.to_string()),
            ("s", a.s.to_string()),
            ("k", a.k.to_string()),
            ("j", a.j.to_string()),
            ("u", u),
            ("cmp-rate", c),
        ]
    }

    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.fields() {
            writeln!(f, "{k}: {v}")?;
        }
        Ok(())
    }
}
