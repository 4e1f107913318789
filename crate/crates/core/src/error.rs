use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checksum mismatch in {path}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("budget exhausted: {spent} of {max} points per image used")]
    BudgetExhausted { spent: usize, max: usize },

    #[error("experiment is locked: {0}")]
    Locked(PathBuf),

    #[error("query {0} not found")]
    UnknownQuery(u64),

    #[error("query {0} already answered")]
    AlreadyAnswered(u64),

    #[error("engine is not waiting for answers")]
    NotSuspended,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
