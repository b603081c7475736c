use std::path::PathBuf;

use thiserror::Error;

/// Location of a failure inside a parsed text document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub offset: usize,
    pub line: usize,
    pub column: usize,
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "byte {} (line {}, column {})", self.offset, self.line, self.column)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid camera rig: {0}")]
    InvalidRig(String),

    #[error("parse error at {location}: {message}")]
    Parse {
        key: Option<String>,
        location: Location,
        message: String,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty instance mask")]
    EmptyMask,

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    /// Short machine-readable category used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config { .. } => "config",
            Error::InvalidRig(_) => "rig",
            Error::Parse { .. } => "parse",
            Error::Archive(_) => "archive",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyMask => "mask",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn with_path<T>(path: &std::path::Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}
