//! Minimal reverse-mode differentiable tensor engine, with the Adam optimizer,
//! a finite-difference gradient checker, and the checkpoint format.

mod adam;
mod check;
mod checkpoint;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{AdamState, Moments};
pub use check::{
    grad_check, numeric_gradient, relative_error, resolution_floor, store_grad_check, summarize,
    GradCheckReport, DEFAULT_FLOOR, DEFAULT_STEP,
};
pub use checkpoint::{is_buffer_name, Checkpoint, MAGIC};
pub use graph::{softmax, BatchStats, Gradients, Graph, Var};
pub use params::{Binder, ParamStore};
pub use tensor::Tensor;

/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[cfg(test)]
mod tests;
