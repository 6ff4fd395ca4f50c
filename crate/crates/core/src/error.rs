use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {}", path.display(), cause)]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("line count mismatch: {source_path} has {source_lines} lines but {target_path} has {target_lines} (first unmatched line {line})")]
    LineCountMismatch {
        source_path: PathBuf,
        target_path: PathBuf,
        source_lines: usize,
        target_lines: usize,
        line: usize,
    },

    #[error("unknown dataset tag {0:?}")]
    UnknownTag(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("vocabulary file: {0}")]
    VocabFormat(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("xml dump: {0}")]
    Xml(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}
