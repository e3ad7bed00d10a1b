use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed image stream at byte offset {offset}: {message}")]
    Decode { offset: usize, message: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("image {width}x{height} is smaller than one {n}x{n} patch")]
    EmptyGrid { width: usize, height: usize, n: usize },

    #[error("insufficient patches: need at least {required}, image has {available}")]
    InsufficientPatches { available: usize, required: usize },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("format error at record {record}: {message}")]
    Format { record: usize, message: String },

    #[error("unknown identifier {0:?}")]
    UnknownId(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }
}
