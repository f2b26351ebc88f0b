use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid value in {op}: {detail}")]
    InvalidValue { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("numeric failure in {layer}: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error in {}: {detail}", path.display())]
    Data { path: PathBuf, detail: String },

    #[error("data error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Data { .. } | Error::Dataset(_) | Error::Lookup(_) | Error::Io { .. } => 3,
            Error::Checkpoint(_) => 3,
            Error::Numeric { .. } | Error::InvalidValue { .. } => 4,
            Error::Shape { .. } | Error::Domain { .. } | Error::Structural(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
