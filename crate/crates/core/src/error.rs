use std::path::PathBuf;

use moediff_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")]
    NonFiniteLoss { step: usize, last_checkpoint: String },
}

pub type Result<T> = std::result::Result<T, MoeError>;

impl MoeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format { path: path.into(), detail: detail.into() }
    }
}
