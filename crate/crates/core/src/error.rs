use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the attack pipeline.
#[derive(Debug, Error)]
pub enum GuapError {
    /// A caller broke an operation's precondition (shape, range, finiteness).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// Loss or activations became NaN/inf during optimization.
    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: String, detail: String },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("digest mismatch in {path}: file is corrupted")]
    Digest { path: PathBuf },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = GuapError> = std::result::Result<T, E>;

impl GuapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GuapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        GuapError::Shape {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::GuapError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
