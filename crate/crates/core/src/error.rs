use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("insufficient audio: {0}")]
    InsufficientAudio(String),

    #[error("unknown id in vocabulary: {0}")]
    Vocabulary(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err($crate::error::Error::$variant(format!($($arg)+)));
            }
        }
    };
}
pub(crate) use ensure;
