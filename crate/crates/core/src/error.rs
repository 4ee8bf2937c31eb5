use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, extents or hyperparameters that cannot describe a valid computation.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data that violates a documented domain invariant (non-binary mask, NaN, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// API misuse such as calling backward on a non-scalar node.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("undefined Hausdorff distance: {0}")]
    UndefinedHausdorff(&'static str),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("payload size mismatch: header describes {expected} bytes, file holds {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("name set mismatch: {0}")]
    NameSetMismatch(String),
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
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
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
