//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (checked mode)")]
    NonFinite { op: &'static str },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format_version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("scene file error: {0}")]
    Scene(String),

    #[error("gradient check failed for {module}: max rel err {max_rel:.3e} at {worst} (tol {tol:.1e})")]
    GradCheck {
        module: String,
        max_rel: f64,
        worst: String,
        tol: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml parse error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
