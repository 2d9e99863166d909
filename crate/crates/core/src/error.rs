use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("joint {joint} is behind the camera (depth {depth})")]
    BehindCamera { joint: usize, depth: f64 },
    #[error("motion generation failed after {attempts} attempts: {detail}")]
    MotionGeneration { attempts: usize, detail: String },
    #[error("corrupt dataset: {0}")]
    Corruption(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
