use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("value out of range for `{name}`: {reason}")]
    Range { name: &'static str, reason: String },

    #[error("batch too small: need at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid loss input: {0}")]
    Input(String),

    #[error("label {label} out of range for {classes} classes (row {row})")]
    Index { row: usize, label: usize, classes: usize },

    #[error("anchor {anchor} has no positive in the batch")]
    NoPositive { anchor: usize },

    #[error("backward called with a cache from a different model state")]
    StaleCache,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("format error in {path}{}: {reason}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format {
        path: PathBuf,
        line: Option<u64>,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
