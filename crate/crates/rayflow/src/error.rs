use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing key `{key}` in {path}")]
    MissingKey { key: String, path: PathBuf },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("bad flow file: {0}")]
    FlowFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("solver failed: {0}")]
    Solver(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit status for the CLI: 1 for malformed input/configuration, 2 for
    /// runtime failures (I/O, solver).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::DimensionMismatch(_)
            | Error::MissingKey { .. }
            | Error::Parse { .. }
            | Error::FlowFormat(_) => 1,
            Error::Io { .. } | Error::Image { .. } | Error::Solver(_) => 2,
        }
    }
}
