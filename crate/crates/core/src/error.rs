use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or layouts that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// An argument outside the operation's domain (empty series, rate >= 1, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data that is inconsistent or unusable.
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    /// Missing artifacts or invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! ensure_shape {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Structural(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_shape;
