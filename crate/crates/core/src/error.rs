use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate feature `{name}`: standard deviation {std:e} below threshold")]
    DegenerateFeature { name: String, std: f64 },

    #[error("index error: {0}")]
    Index(String),

    #[error("unknown category `{0}` (not in vocabulary)")]
    Vocabulary(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("template error: missing field `{0}`")]
    Template(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    IoOther(String),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 1 validation/config, 2 IO, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::IoOther(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
