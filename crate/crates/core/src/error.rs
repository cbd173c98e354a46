use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient input: {0}")]
    InsufficientInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("label out of range: {0}")]
    Label(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("capacity exceeded: {segments} segments but only {tokens} tokens")]
    Capacity { segments: usize, tokens: usize },
    #[error("cannot stratify: {0}")]
    Stratification(String),
    #[error("test undefined: {0}")]
    UndefinedTest(String),
    #[error("refusing to overwrite existing run in {0} (pass --force)")]
    RefuseOverwrite(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::RefuseOverwrite(_) => 3,
            Error::Numeric(_) => 5,
            Error::Io { .. } => 1,
            _ => 4,
        }
    }
}
