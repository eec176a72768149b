//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by preprocessing, estimation, and training routines.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An array had the wrong shape for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input is degenerate for the operation (e.g. constant volume for min-max).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A probability table or other validated input failed its invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric guard tripped (zero norms, NaN losses, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
    pub fn degenerate(msg: impl Into<String>) -> Self {
        CoreError::Degenerate(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }
}
