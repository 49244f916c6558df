//! Two-stage fine-tuning of a mostly-frozen causal transformer for
//! multivariate time-series forecasting.
//!
//! Series are instance-normalized, split into univariate channels and cut
//! into overlapping patches. Each patch becomes a token through a
//! convolutional encoder plus learned positional and calendar embeddings.
//! The transformer stack stays frozen except for its layer-norm affines and
//! low-rank adapters on the query and key projections.
//!
//! * Stage 1 ([`train::run_alignment`]) trains next-patch prediction.
//! * Stage 2 ([`train::run_lp_ft`]) trains a flattened linear forecast head
//!   under reversible instance normalization, first alone (linear probing)
//!   and then together with the trainable groups (fine-tuning).
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod backbone;
pub mod config;
pub mod data;
pub mod encode;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use model::{ForecastShape, Model, ModelConfig, ParamCensus, Stage};
pub use params::{Grads, ParamGroup, ParamId, ParamStore};
pub use scalar::Scalar;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Grads32 = Grads<f32>;
pub type Grads64 = Grads<f64>;
