//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("graph root is not a scalar (shape {shape:?})")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix entry at ({row},{col}) must be strictly positive, got {value}")]
    NonPositiveEntry { row: usize, col: usize, value: f64 },
    #[error("dataset format error: {0}")]
    DatasetFormat(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
