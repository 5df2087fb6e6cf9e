use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time window [{start}, {end}): end must exceed start")]
    InvalidWindow { start: f64, end: f64 },

    #[error("event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("event {index}: {reason}")]
    InvalidEvent { index: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint write failed at iteration {iteration} ({path}): {source}")]
    CheckpointWrite {
        path: PathBuf,
        iteration: usize,
        #[source]
        source: std::io::Error,
    },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error(
        "sinkhorn did not converge in {iterations} iterations \
         (row residual {row_residual:e}, column residual {col_residual:e})"
    )]
    NonConvergence {
        iterations: usize,
        row_residual: f64,
        col_residual: f64,
    },

    #[error("numerical abort: non-finite value in {component}{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NumericalAbort {
        component: String,
        iteration: Option<usize>,
    },

    #[error("feature extractor fingerprint missing: extractor has not been trained")]
    FingerprintMissing,

    #[error("feature extractor not certified: validation accuracy {accuracy:.3} below {threshold}")]
    Uncertified { accuracy: f64, threshold: f64 },

    #[error("metric reports were computed with different extractors ({left} vs {right})")]
    FingerprintMismatch { left: String, right: String },

    #[error("config mismatch: {field}")]
    ConfigMismatch { field: String },

    #[error("index error: {0}")]
    Index(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
