use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("svd did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },

    #[error("rank {k} exceeds the minimum dimension {max} of layer `{layer}`")]
    RankExceedsLayer { layer: String, k: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("plan parse error at position {position}: {message}")]
    PlanParse { position: usize, message: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("gradient tape already consumed")]
    TapeReused,

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("corrupt container: bad magic, expected {:?}, found {:?}", expected.escape_ascii().to_string(), found.escape_ascii().to_string())]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt container: {0}")]
    Corrupt(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
