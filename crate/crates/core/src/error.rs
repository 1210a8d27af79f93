use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported datatype: {0}")]
    UnsupportedDtype(String),

    #[error("malformed NIfTI header: {0}")]
    Nifti(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("encoder parameters changed during frozen-encoder training")]
    EncoderDrift,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("label {0} is not in the declared label set")]
    UnknownLabel(i64),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("fold {fold} failed: {source}")]
    FoldFailed {
        fold: usize,
        /// Report over the folds that completed.
        partial: Box<crate::metrics::MetricReport>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
