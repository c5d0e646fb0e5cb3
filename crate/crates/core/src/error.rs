use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported op on tape: {0} has no adjoint")]
    Unsupported(String),

    #[error("IDX parse error at byte {offset}: {kind}")]
    Idx { offset: usize, kind: IdxErrorKind },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// The three ways an IDX file can be malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxErrorKind {
    BadMagic,
    UnsupportedType(u8),
    Truncated { needed: usize, available: usize },
}

impl std::fmt::Display for IdxErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IdxErrorKind::BadMagic => write!(f, "bad magic (expected two zero bytes)"),
            IdxErrorKind::UnsupportedType(t) => {
                write!(f, "unsupported element type 0x{t:02x} (only 0x08 is supported)")
            }
            IdxErrorKind::Truncated { needed, available } => {
                write!(f, "truncated: needed {needed} bytes, {available} available")
            }
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
