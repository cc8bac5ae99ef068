//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GapError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of its legal range.
    #[error("invalid config: {0}")]
    Config(String),

    /// An input value violates an operation precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// Malformed or mismatched checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed image or dataset file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GapError>;
