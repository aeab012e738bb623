use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum MolfError {
    /// A caller broke an operation's precondition (shapes, ranges, counts).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared where finite numbers are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Missing or inconsistent configuration (checkpoints, flags, stage tags).
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset or manifest failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file failed its integrity checks.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MolfError> = std::result::Result<T, E>;

impl MolfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MolfError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Early-return a [`MolfError::Contract`] unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::MolfError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
