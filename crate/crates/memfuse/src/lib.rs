//! Multimodal attention-fusion engine for memorability prediction.
//!
//! The crate trains and evaluates a configurable fused-attention
//! regressor over precomputed per-modality embedding sequences (video,
//! audio, text), and layers analysis tooling on top of the predictor:
//!
//! - [`tensor`] — float64 tensors with a reverse-mode differentiation tape
//! - [`layers`] — linear/layer-norm/dropout/multi-head attention/pooling
//! - [`model`] — the configurable predictor (modality subsets, attention
//!   modes) with a versioned checkpoint format
//! - [`data`] — embedding file and manifest I/O, metadata parsing, and a
//!   synthetic dataset generator with a planted cross-modal signal
//! - [`train`] — deterministic mini-batch training with validation-based
//!   model selection and the ablation harness
//! - [`stats`] — rank correlation, ANOVA, and t-test kernel
//! - [`insight`] — content-factor analysis and candidate reranking
//! - [`gradcheck`] — finite-difference gradient validation

mod crc32;

pub mod data;
pub mod gradcheck;
pub mod insight;
pub mod layers;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Crate-level error, aggregating per-module failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Insight(#[from] insight::InsightError),
}
