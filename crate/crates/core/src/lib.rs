//! Continual training of CTC sequence models without catastrophic forgetting.
//!
//! A frozen copy of the original model supplies distillation targets on
//! original-domain data while the adapting copy also fits CTC on both the
//! original and the target domain. Fine-tuning and retraining baselines,
//! a synthetic two-domain corpus, and CER evaluation sit alongside.
//!
//! Everything numeric is generic over [`Scalar`]; the `*64` aliases below
//! are what the CLI and the test suites use.

pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diff::Tensor<f64>;
pub type Graph64<'a> = diff::Graph<'a, f64>;
pub type Model64 = model::ModelParams<f64>;
pub type Model32 = model::ModelParams<f32>;
pub type Utterance64 = data::Utterance<f64>;
pub type DomainData64 = data::DomainData<f64>;
pub type TrainRun64 = train::TrainRun<f64>;
