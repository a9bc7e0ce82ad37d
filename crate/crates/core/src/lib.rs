//! promptgate: continual learning with instance-gated prompt injection.
//!
//! A small dual-encoder model (image and text towers trained contrastively)
//! is frozen after pre-training; each incremental task then adds per-layer
//! prompt pools, per-layer binary prompt gates, and Gaussian feature
//! statistics. At inference, a two-stage confidence router decides per
//! instance whether prompts apply and with what weight, and the benchmark
//! harness scores forward and backward forgetting over a stream of synthetic
//! domains.
//!
//! The numeric core is generic over the scalar type (`f32` for training,
//! `f64` for gradient and oracle checks); see [`Tensor32`] / [`Tensor64`].

pub mod diff;
pub mod encoder;
pub mod error;
pub mod gate;
pub mod harness;
pub mod prompts;
pub mod rng;
pub mod routing;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Training-precision tensor.
pub type Tensor32 = diff::Tensor<f32>;
/// Test/oracle-precision tensor.
pub type Tensor64 = diff::Tensor<f64>;
