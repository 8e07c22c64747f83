use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FcbmError>;

#[derive(Debug, Error)]
pub enum FcbmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file: bad magic, unsupported version, truncated or inconsistent payload.
    #[error("{0}")]
    Format(String),

    /// Well-formed input whose contents are unusable (non-finite values, duplicate names, bad labels).
    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Dimension(String),

    #[error("{0}")]
    Invariant(String),

    #[error("{0}")]
    Numeric(String),
}

impl FcbmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FcbmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used in the CLI's `error(<kind>):` prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            FcbmError::Io { .. } => "io",
            FcbmError::Format(_) => "format",
            FcbmError::Data(_) => "data",
            FcbmError::Dimension(_) => "dimension",
            FcbmError::Invariant(_) => "invariant",
            FcbmError::Numeric(_) => "numeric",
        }
    }

    /// Process exit code: 3 for data/format problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            FcbmError::Numeric(_) => 4,
            _ => 3,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::FcbmError::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
