//! Error type shared across the crate.

/// Errors surfaced by model fitting, sampling, planning, and the run loop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input had the wrong length or shape.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A scalar or vector parameter violated its documented range.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Linear algebra gave up, e.g. a Gram matrix stayed non-positive-definite
    /// through the whole jitter escalation schedule.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A run configuration failed validation before the loop started.
    #[error("config rejected: {0}")]
    ConfigInvalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
