//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EapoError>;

#[derive(Debug, Error)]
pub enum EapoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("query list is empty")]
    EmptyQuerySet,

    #[error("k must be at least 1")]
    ZeroK,

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("all loss term lists are empty")]
    EmptyBatch,

    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },

    #[error("metric requires both classes but input contains only label {0}")]
    SingleClass(u8),

    #[error("no positive labels present")]
    NoPositives,

    #[error("record {index} has label 1 but no positive intensity")]
    MissingIntensity { index: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("local manifold is empty")]
    EmptyManifold,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Export(String),
}
