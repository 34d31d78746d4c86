use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes reported by the CLI.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label is not one-hot at pixel {pixel}")]
    NotOneHot { pixel: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical divergence at step {step} (batch seed {batch_seed:#018x}): {detail}")]
    Divergence { step: u64, batch_seed: u64, detail: String },

    #[error(
        "gradient check failed for `{param}`[{index}]: analytic {analytic:e}, numeric {numeric:e}, relative error {rel_err:e}"
    )]
    GradCheck { param: String, index: usize, analytic: f64, numeric: f64, rel_err: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, #[source] source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => exit_code::CONFIG,
            Error::Io { .. } | Error::Checkpoint(_) => exit_code::IO,
            _ => exit_code::DIVERGENCE,
        }
    }
}

/// Failure modes when decoding a checkpoint file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("config hash mismatch: checkpoint {found:#018x}, config {expected:#018x}")]
    ConfigMismatch { expected: u64, found: u64 },
}

impl CheckpointError {
    /// Stable numeric code for each failure kind.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic => 1,
            CheckpointError::UnsupportedVersion(_) => 2,
            CheckpointError::Truncated(_) => 3,
            CheckpointError::Malformed(_) => 4,
            CheckpointError::ConfigMismatch { .. } => 5,
        }
    }
}
