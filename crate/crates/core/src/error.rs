use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("cannot aggregate an empty set of updates")]
    EmptyAggregation,
    #[error("local shard is empty")]
    EmptyShard,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("round {round}: {source}")]
    Round { round: u32, source: Box<Error> },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(expected: usize, actual: usize) -> Self {
        Error::Shape { expected, actual }
    }

    /// Wraps the error with the federation round it occurred in.
    pub fn in_round(self, round: u32) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            other => Error::Round { round, source: Box::new(other) },
        }
    }
}
