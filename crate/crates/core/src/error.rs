//! Error type shared by every module; each variant carries a stable short
//! code used by the CLI's `E:<code>:` stderr convention.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement, named after the operation that rejected it.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// NaN/Inf produced where only finite values are legal.
    #[error("non-finite values: {0}")]
    NonFinite(String),

    /// API misuse (preconditions violated by the caller).
    #[error("usage: {0}")]
    Usage(String),

    /// Rejected input data (missing labels, non-monotone times, ...).
    #[error("data: {0}")]
    Data(String),

    /// Unparseable file content.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    /// Filesystem failure, with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-parsable code for the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "nonfinite",
            Error::Usage(_) => "usage",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
