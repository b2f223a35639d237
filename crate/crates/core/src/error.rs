use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("teacher has no populated normalization statistics; pretrain the teacher on private data first")]
    StatisticsNotPopulated,

    #[error("training diverged at step {step}: {what} became non-finite")]
    Diverged { step: usize, what: String },

    #[error("not an IDX file: {0}")]
    NotIdx(String),

    #[error("truncated IDX payload in {path}: expected {expected} bytes, found {actual}")]
    TruncatedIdx {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
