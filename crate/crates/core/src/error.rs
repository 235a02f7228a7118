use std::io;

use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// Variants map onto the process exit-code contract through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 0 ok, 2 config, 3 data/IO, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Format(_) | Error::Data(_) | Error::Io { .. } | Error::Input(_) => 3,
            Error::Dimension(_)
            | Error::Metric(_)
            | Error::Numeric(_)
            | Error::Internal(_) => 4,
        }
    }
}
