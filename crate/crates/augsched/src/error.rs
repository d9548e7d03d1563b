//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum SimError {
    /// A numeric argument violated its domain (negative length, zero rate, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A request or configuration failed validation.
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// A trace record failed to parse, with the offending line and field.
    #[error("trace parse error at line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    /// Reports being compared were produced from different traces.
    #[error("reports disagree on the underlying trace: {0}")]
    TraceMismatch(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SimError::Domain(msg.into())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SimError>;
