use std::path::PathBuf;

use crate::model::ModelParams;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid label: {0}")]
    Label(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss while perturbing parameter `{param}`")]
    NonFiniteLoss { param: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence {
        epoch: usize,
        step: usize,
        last_finite: Box<ModelParams>,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Load { .. } | Error::Io { .. } | Error::Json { .. } | Error::Label(_) => ErrorKind::Data,
            Error::Shape { .. } | Error::UndefinedMetric(_) | Error::Degenerate(_) => ErrorKind::Data,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Divergence { .. } => ErrorKind::Numerical,
        }
    }

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

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
