//! Differentiable-operation substrate: tensors, gradients, parameters.

mod ops;
mod params;
mod tensor;

pub use ops::{concat_cols, concat_rows, embedding_lookup, neg_log_softmax_diag};
pub use params::{tensor_checksum, ParameterSet};
pub use tensor::Tensor;

/// Variance floor in layer normalization; defines the zero-variance row case.
pub const LAYERNORM_EPS: f64 = 1e-5;
