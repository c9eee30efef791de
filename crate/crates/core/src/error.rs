//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A config failed whole-config validation; the message names the violated rule.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation was called with inputs violating its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A loss term became non-finite; training must abort, naming the term.
    #[error("non-finite loss in term '{term}' at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("feature archive: {0}")]
    Archive(String),

    #[error("token shard: {0}")]
    Shard(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn msg(s: impl Into<String>) -> Self {
        Error::Msg(s.into())
    }

    /// Exit code contract: validation errors exit 1, runtime aborts exit 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::InvalidInput(_) | Error::ShapeMismatch(_)
        )
    }
}
