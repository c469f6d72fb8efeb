use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not fit the operation.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf produced or detected.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code: 2 bad args/config, 3 data error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 3,
            Error::Shape { .. } | Error::Numeric(_) => 4,
        }
    }

    /// Short machine-parsable tag printed in front of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Json(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Shape { .. } => "E_SHAPE",
            Error::Numeric(_) => "E_NUMERIC",
        }
    }
}
