//! Error type shared across the crate.

use thiserror::Error;

use crate::search_space::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or architecture failed structural validation.
    #[error("invalid configuration:\n{0}")]
    InvalidConfig(ValidationReport),

    /// An encoded vector has a length that cannot hold any configuration.
    #[error("malformed-length: {len} (expected 5*N+9 with N in 5..=12)")]
    MalformedLength { len: usize },

    /// A token in an encoded vector lies outside its field's legal range.
    #[error("token-out-of-range at position {position}: token {token} not valid for {field}")]
    TokenOutOfRange {
        position: usize,
        token: i64,
        field: &'static str,
    },

    /// Input spatial dims are not divisible by the stride demanded by a level.
    #[error("indivisible-input: level {level} requires spatial dims divisible by {divisor}, got {dim}")]
    IndivisibleInput { level: i64, divisor: usize, dim: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A non-finite gradient was produced for the named parameter tensor.
    #[error("nan-gradient in {role}")]
    NanGradient { role: String },

    /// Predictor training diverged; carries the last finite loss seen.
    #[error("training diverged (last finite loss {last_finite_loss})")]
    Divergence { last_finite_loss: f64 },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
