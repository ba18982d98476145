use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left {lhs:?} vs right {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every trainable tensor")]
    Detached,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("ingestion: {0}")]
    Ingestion(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("line {line}: {message}")]
    Label { line: usize, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("ensemble: {0}")]
    Ensemble(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short stable identifier used in the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::DataLength { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NonScalarLoss(_) | Error::Detached => "autodiff",
            Error::Divergence(_) => "divergence",
            Error::Ingestion(_) | Error::Format { .. } => "format",
            Error::Label { .. } => "label",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Checkpoint(_) => "checkpoint",
            Error::Ensemble(_) => "ensemble",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
