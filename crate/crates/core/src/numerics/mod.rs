//! Dense tensors, a differentiation tape and a finite-difference oracle.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, roundoff_resolution, EntryCheck, GradCheckOptions, GradCheckReport, Verdict};
pub use graph::{flop_cost, softmax_along, CombineRoute, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Epsilon guarding the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[cfg(test)]
mod tests;
