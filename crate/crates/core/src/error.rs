use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GosumError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("document {doc_id}: {message}")]
    Document { doc_id: String, message: String },

    #[error("label store: {0}")]
    LabelStore(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GosumError>;
