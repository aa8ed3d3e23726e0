//! Analytic gradients against central finite differences for a network
//! behind lookup tables.

use crate::data::ImageBatch;
use crate::error::Result;
use crate::gradcore::{finite_diff_grad, max_relative_error, Graph, Tensor};
use crate::lookup::{LookupTables, TableKind};
use crate::network::{ConvBlock, Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub threshold: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Scales the analytic table gradient; anything but 1 is a deliberately
    /// broken backward pass used to show that the check can fail.
    pub table_grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            floor: 1e-6,
            table_grad_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub weight_error: f64,
    pub table_error: f64,
    pub weights_checked: usize,
    pub tables_checked: usize,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.weight_error.max(self.table_error)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.threshold
    }
}

/// A small model for exhaustive checks: under 5000 scalars including
/// tables up to `u = 5`.
pub fn tiny_config(input_channels: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        input_channels,
        height: 8,
        width: 8,
        conv_blocks: vec![ConvBlock::new(3, 4, 1, true), ConvBlock::new(3, 6, 1, true)],
        head_width: 8,
        classes: 3,
        seed,
    }
}

/// Mean cross-entropy of `model` behind `tables`.
pub fn batch_loss(model: &Model, tables: &LookupTables, batch: &ImageBatch, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let (_, x) = tables.attach(&mut g, batch, true)?;
    let (logits, _) = model.forward_graph(&mut g, x)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    Ok(g.value(loss).item().expect("scalar"))
}

/// Analytic gradients of [`batch_loss`]: one tensor per model parameter,
/// then the table gradient.
pub fn analytic_grads(
    model: &Model,
    tables: &LookupTables,
    batch: &ImageBatch,
    labels: &[usize],
) -> Result<(Vec<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let (t, x) = tables.attach(&mut g, batch, false)?;
    let (logits, ids) = model.forward_graph(&mut g, x)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let mut grads = g.backward(loss)?;
    let weights = ids.iter().map(|&id| grads.take(id).expect("param leaf")).collect();
    Ok((weights, grads.take(t).expect("table leaf")))
}

/// Checks every weight and every table entry.
pub fn gradient_check(
    model: &Model,
    tables: &LookupTables,
    batch: &ImageBatch,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (weights, table_grad) = analytic_grads(model, tables, batch, labels)?;
    let mut weight_error: f64 = 0.0;
    let mut weights_checked = 0;
    for (i, analytic) in weights.iter().enumerate() {
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |p| {
                probe.params_mut()[i].value = p.clone();
                batch_loss(&probe, tables, batch, labels).expect("shapes checked by analytic pass")
            },
            &model.params()[i].value,
            opts.step,
        );
        weight_error = weight_error.max(max_relative_error(analytic, &numeric, opts.floor));
        weights_checked += analytic.len();
    }

    let kind: TableKind = tables.kind();
    let numeric = finite_diff_grad(
        |p| {
            let t = LookupTables::from_entries(kind, p.clone()).expect("same shape");
            batch_loss(model, &t, batch, labels).expect("shapes checked by analytic pass")
        },
        tables.entries(),
        opts.step,
    );
    let scaled = Tensor::new(
        table_grad.shape().to_vec(),
        table_grad.data().iter().map(|g| g * opts.table_grad_scale).collect(),
    )?;
    Ok(GradCheckReport {
        weight_error,
        table_error: max_relative_error(&scaled, &numeric, opts.floor),
        weights_checked,
        tables_checked: tables.entries().len(),
        threshold: opts.threshold,
    })
}
