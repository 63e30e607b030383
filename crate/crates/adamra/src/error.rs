//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left {lrows}x{lcols} vs right {rrows}x{rcols}")]
    ShapeMismatch { op: &'static str, lrows: usize, lcols: usize, rrows: usize, rcols: usize },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error (line {line}): {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("unknown model tag `{0}` (expected softmax, kernel, or adamra)")]
    UnknownModelTag(String),

    #[error("column `{0}` is constant; min-max scaling is undefined")]
    ConstantColumn(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("non-finite loss while perturbing coordinate {coord}")]
    NonFiniteLoss { coord: usize },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
