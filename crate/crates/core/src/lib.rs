//! Disentangled per-label features versus one pooled shared feature for
//! multi-label classification.
//!
//! The crate bundles everything needed to study the two mechanisms at desk
//! scale: a dense [`Tensor`] with tape-based reverse-mode differentiation,
//! the cascaded cross-attention model and the pooled baseline, evaluation
//! metrics, the closed-form optimal shared-feature analysis with an
//! independent numeric check, a synthetic spatial multi-label generator and
//! a training loop.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pin the
//! two instantiations used in practice.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dlt;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Storage type used for training, checkpoints and datasets.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensors, used by gradient checks and oracles.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type DlflModel32 = model::DlflModel<f32>;
pub type OfmlModel32 = model::OfmlModel<f32>;
