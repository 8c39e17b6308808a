use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {len} data")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("minibatch is empty")]
    EmptyBatch,

    #[error("duplicate index {0} in minibatch")]
    DuplicateIndex(usize),

    #[error("parameter table is not initialized")]
    TableNotInitialized,

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
