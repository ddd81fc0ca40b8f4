use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the front-end exit-code taxonomy: configuration
/// problems, API misuse, numerical failures, resource limits, and data
/// (file/format) problems.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (rejected before any work starts).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. stepping a finished episode.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical failure (underflow, non-finite values, divergence).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Problem size exceeds a hard limit.
    #[error("resource error: {0}")]
    Resource(String),

    /// Malformed or mismatched data file.
    #[error("data error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Data {
        /// 1-based line number within the offending file, when known.
        line: Option<usize>,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }

    pub fn data(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
