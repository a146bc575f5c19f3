use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A transform could not be inverted or solved. `indices` lists the
    /// offending batch elements when the failure is per-example.
    #[error("singular transform: {reason} (batch elements {indices:?})")]
    SingularTransform { reason: String, indices: Vec<usize> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("transform kind mismatch: {left} vs {right}")]
    KindMismatch { left: String, right: String },

    #[error("config error at line {line}: key `{key}`: {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("domain {0} contains no decodable images")]
    EmptyDomain(PathBuf),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn singular(reason: impl Into<String>, indices: Vec<usize>) -> Self {
        Error::SingularTransform {
            reason: reason.into(),
            indices,
        }
    }
}
