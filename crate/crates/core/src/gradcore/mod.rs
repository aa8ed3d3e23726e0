//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod finite_diff;
mod kernels;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use tape::{scatter_add, Gradients, Graph, NodeId, OpKind};
pub use tensor::Tensor;
