use std::path::PathBuf;

/// Errors shared across the tensor engine, graph construction, models,
/// attacks and the training harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tensor was not produced on this tape")]
    NoTape,

    #[error("fewer than {needed} KNN candidates survived distance dropout (query pixel {query}, {survived} survived)")]
    InsufficientCandidates {
        query: usize,
        needed: usize,
        survived: usize,
    },

    #[error("all {k} neighbors dropped by attention dropout for query pixel {query}")]
    AllNeighborsDropped { query: usize, k: usize },

    #[error("peer graph does not match feature set: {0}")]
    InvalidGraph(String),

    #[error("unknown architecture id: {0}")]
    UnknownArchitecture(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("training diverged at epoch {epoch} (non-finite loss){}", last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    Diverged {
        epoch: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
