use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown {kind} `{name}`; valid names: {valid}")]
    NotFound {
        kind: &'static str,
        name: String,
        valid: String,
    },
    #[error("unknown config key `{0}`")]
    ConfigKey(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("target error: {0}")]
    Target(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("subset error: {0}")]
    Subset(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("CKA undefined: {0}")]
    CkaUndefined(String),
    #[error("missing activation tap `{0}`")]
    Tap(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("tensor backend: {0}")]
    Backend(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NotFound { .. }
            | Error::ConfigKey(_)
            | Error::Config(_)
            | Error::Shape(_)
            | Error::Batch(_) => ErrorCategory::Config,
            Error::Numeric(_) | Error::CkaUndefined(_) | Error::Backend(_) => ErrorCategory::Numeric,
            Error::Target(_)
            | Error::Subset(_)
            | Error::Data(_)
            | Error::Tap(_)
            | Error::Report(_)
            | Error::Parse { .. }
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}
