use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged in {context}: {detail}")]
    Training { context: String, detail: String },

    #[error("gradient oracle failed at coordinate {index}: f is not finite")]
    Oracle { index: usize },

    #[error("cannot plan segments: {0}")]
    Planning(String),

    #[error("coverage gap in reconstruction over [{start}, {end})")]
    CoverageGap { start: usize, end: usize },

    #[error("{file}: row {row}: {detail}")]
    Ingestion {
        file: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("channel '{0}' has zero variance over the training span")]
    ZeroVariance(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the caller's configuration or inputs rather than by a
    /// failure during computation. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Planning(_)
            | Error::Ingestion { .. }
            | Error::ZeroVariance(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
