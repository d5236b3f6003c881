//! Masked pruning over federated learning.
//!
//! Nodes train small dense networks on private shards, score their neuron
//! groups, and upload one bit per group instead of full-precision weights.
//! The parameter server averages the bit masks into a vote histogram and
//! reduces it to a consensus mask, so a single contaminated node is outvoted
//! rather than averaged in. After the pruning schedule finishes, the masked
//! model is refined with ordinary federated averaging.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod mask;
pub mod nn;
pub mod scalar;
pub mod scoring;
pub mod wire;

pub use error::{Error, Result};
pub use mask::{MaskLayout, PruneMask};
pub use nn::{ArchSpec, Batch, Gradients, LayerSpec, Model};
pub use scalar::{Precision, Scalar};
pub use scoring::{NormOrder, ScoreVector};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Batch32 = Batch<f32>;
pub type Batch64 = Batch<f64>;
pub type Gradients64 = Gradients<f64>;
pub type ScoreVector64 = ScoreVector<f64>;
