//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong while building or running an experiment.
#[derive(Debug, Error)]
pub enum PurifyError {
    /// A configuration value is out of range or inconsistent with another.
    #[error("invalid config: {0}")]
    Config(String),

    /// Tensor or dataset dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A dataset violates a structural requirement (sizes, labels, values).
    #[error("invalid data: {0}")]
    Data(String),

    /// Reading or writing an artifact failed.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A persisted artifact could not be parsed.
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    /// Numeric failure during training (divergence, NaN loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A pipeline stage failed; carries the stage name and the cause.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<PurifyError>,
    },
}

impl PurifyError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PurifyError::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<String>, reason: impl Into<String>) -> Self {
        PurifyError::Parse { path: path.into(), reason: reason.into() }
    }
}

pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> PurifyError {
    PurifyError::io(path.display().to_string(), source)
}

pub(crate) fn parse(path: &std::path::Path, reason: impl Into<String>) -> PurifyError {
    PurifyError::parse(path.display().to_string(), reason)
}
