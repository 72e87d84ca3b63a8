use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training diverged at {stage} (epoch {epoch}, step {step}): {detail}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable short code for machine-readable error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::MissingInput(_) => "missing_input",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
