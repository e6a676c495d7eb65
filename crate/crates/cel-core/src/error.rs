use std::time::Duration;

use thiserror::Error;

/// Errors produced anywhere in the lab pipeline.
#[derive(Debug, Error)]
pub enum CelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed cohort/config file content, with the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    /// Numerical failure (non-finite loss, solver divergence, ...).
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("estimate undefined: {0}")]
    Undefined(String),

    #[error("cell exceeded wall-clock cap of {0:?}")]
    Timeout(Duration),
}

pub type Result<T> = std::result::Result<T, CelError>;

impl CelError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CelError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CelError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CelError::Numeric(msg.into())
    }
}
