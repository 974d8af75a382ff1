use std::path::PathBuf;

use imuge_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImugeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {msg}")]
    Codec { path: PathBuf, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

pub type Result<T> = std::result::Result<T, ImugeError>;

impl ImugeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> ImugeError {
    ImugeError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> ImugeError {
    ImugeError::Shape(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> ImugeError {
    ImugeError::Contract(msg.into())
}
