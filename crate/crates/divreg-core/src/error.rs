//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported dimensionality: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite value in {context} at iteration {iteration}")]
    NonFinite { context: String, iteration: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
