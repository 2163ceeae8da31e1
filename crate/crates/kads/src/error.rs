//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    /// The input cannot yield an example; the caller should move on.
    #[error("skipped: {0}")]
    Skip(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
