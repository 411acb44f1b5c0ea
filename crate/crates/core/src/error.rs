use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Input outside the mathematical domain of a function (e.g. negative time).
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed arguments: dimension mismatches, empty inputs, bad ranges.
    #[error("argument error: {0}")]
    Argument(String),
    /// Inconsistent or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Structural validation failure of user-supplied model data.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("resampling error at event {step}: {reason}")]
    Resampling { step: usize, reason: String },
    /// A runtime invariant was violated (e.g. a non-positive correction term).
    #[error("invariant violation: {0}")]
    Invariant(String),
}
