//! One error type for the whole engine; variants name the contract that broke.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Task registry misuse: unknown ids, duplicate registration, ordering
    /// violations, or operations applied in the wrong lifecycle state.
    #[error("task registry: {0}")]
    Registry(String),

    /// A frozen parameter was about to be written. This is a hard fault:
    /// earlier tasks must stay bit-identical forever.
    #[error("parameter isolation violated: {0}")]
    Isolation(String),

    /// Checkpoint data was missing, truncated, or inconsistent.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Configuration file or override could not be applied.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
