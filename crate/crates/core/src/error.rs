use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid rotation matrix (orthonormality residual {residual:e})")]
    InvalidRotation { residual: f64 },

    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("timestep {t} out of range for a schedule of {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate quaternion")]
    ZeroQuaternion,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("no embedding stored for image {0}")]
    UnknownImage(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
