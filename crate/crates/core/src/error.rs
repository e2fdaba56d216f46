use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid body state: {0}")]
    InvalidState(String),

    #[error("gravitational singularity: bodies {0} and {1} coincide with zero softening")]
    Singularity(usize, usize),

    #[error("invalid parameter `{key}`: {constraint}")]
    InvalidParam { key: String, constraint: String },

    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("dataset format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated blob {path}: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("manifest/blob shape disagreement for `{field}`: {detail}")]
    ShapeMismatch { field: String, detail: String },

    #[error("slot capacity exceeded: {objects} objects for {slots} slots")]
    Capacity { objects: usize, slots: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::InvalidParam {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    /// Short machine-readable tag used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidState(_) => "invalid_state",
            Error::Singularity(..) => "singularity",
            Error::InvalidParam { .. } => "invalid_param",
            Error::BehindCamera(_) => "behind_camera",
            Error::Generation(_) => "generation",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::TruncatedBlob { .. } => "truncated_blob",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Capacity { .. } => "capacity",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Candle(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::TomlDe(_) => "toml",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
