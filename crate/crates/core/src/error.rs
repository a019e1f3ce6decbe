use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gradient seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("cannot convert masked sequence")]
    MaskedConversion,
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("enumeration guard exceeded: {0}")]
    OracleGuard(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
