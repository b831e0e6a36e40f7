use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("gradient audit failed: {0}")]
    Audit(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch norm: {0}")]
    DegenerateVariance(String),
    #[error("weight transfer failed, mismatched parameters: {}", .0.join(", "))]
    Transfer(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("normalization stats: {0}")]
    Stats(String),
    #[error("decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
