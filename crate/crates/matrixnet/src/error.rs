//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor was constructed or combined with inconsistent extents.
    /// `axis` names the offending axis when known.
    #[error("shape mismatch on {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        axis: String,
        expected: String,
        got: String,
    },

    /// A convolution spec would produce an output extent below 1.
    #[error("conv output extent < 1 on {axis}: input {input}, kernel {kernel}, stride {stride}, pad {pad}")]
    EmptyConvOutput {
        axis: String,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },

    /// A forward or backward pass produced a NaN or Inf value.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An optimizer step saw a NaN/Inf gradient for a named parameter.
    #[error("non-finite gradient for parameter '{param}'")]
    BadGradient { param: String },

    /// Input extents not divisible by the full downsampling factor.
    #[error("input extents {height}x{width} not divisible by {factor}; pad the image to a multiple of {factor} first")]
    IndivisibleInput {
        height: usize,
        width: usize,
        factor: usize,
    },

    /// A value failed domain validation (ranges, probabilities, config fields).
    #[error("invalid value for {what}: {why}")]
    InvalidValue { what: String, why: String },

    /// Head outputs and target maps cover different layer sets.
    #[error("layer set mismatch: {detail}")]
    LayerSetMismatch { detail: String },

    /// Dataset or annotation file problems.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(axis: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn invalid(what: impl Into<String>, why: impl Into<String>) -> Self {
        Error::InvalidValue {
            what: what.into(),
            why: why.into(),
        }
    }
}
