//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextLocError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TextLocError>;
