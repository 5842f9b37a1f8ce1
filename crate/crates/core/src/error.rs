//! Error types shared across the engine.

use thiserror::Error;

/// Errors produced by a [`crate::backend::ModelBackend`].
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("query `{0}` not found in backend")]
    QueryNotFound(String),
    #[error("perturbation dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Engine-level errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("backend failure for query `{query_id}`: {source}")]
    Backend {
        query_id: String,
        #[source]
        source: BackendError,
    },
    #[error("no detection threshold configured; calibrate first or set one explicitly")]
    MissingThreshold,
    #[error("calibration mismatch: {0}")]
    CalibrationMismatch(String),
    #[error("non-finite value while accumulating direction {direction}")]
    NonFinite { direction: usize },
    #[error("population generation failed: {0}")]
    Generation(String),
    #[error("unsupported backend: {0}")]
    UnsupportedBackend(String),
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn backend(query_id: impl Into<String>, source: BackendError) -> Self {
        Error::Backend {
            query_id: query_id.into(),
            source,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
