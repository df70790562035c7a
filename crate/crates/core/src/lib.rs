//! Map entity representation learning: atomic data files, composable
//! token/graph/sequence encoders, self-supervised pretraining, downstream
//! fine-tuning, metrics and a benchmark harness.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod autodiff;
pub mod error;
pub mod scalar;

pub mod bench;
pub mod data;
pub mod downstream;
pub mod encoders;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};

/// Default single-precision pipeline.
pub type Pipeline = encoders::EncoderPipeline<f32>;
/// Double-precision pipeline, used for gradient checks.
pub type Pipeline64 = encoders::EncoderPipeline<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type StsIndex32 = downstream::StsIndex<f32>;
