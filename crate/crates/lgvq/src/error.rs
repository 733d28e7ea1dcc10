//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected; every offending key is listed.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// Dataset or manifest problem (missing image, malformed record, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss encountered during training.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    /// Checkpoint file is unreadable, corrupted, or has an unknown format tag.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Tensor/shape contract violated by a caller.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
