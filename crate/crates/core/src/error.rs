use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
///
/// Each variant maps onto one process exit code via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category printed by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::ConfigParse { .. } => "config",
            Error::Input(_) | Error::Data(_) | Error::Format { .. } | Error::Io { .. } => "data",
            Error::Invariant(_) => "invariant",
        }
    }

    /// 2 config, 3 data, 4 internal invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            _ => 4,
        }
    }
}
