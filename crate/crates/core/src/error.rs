use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}, line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),

    #[error("duplicate query id `{0}`")]
    DuplicateQueryId(String),

    #[error("document index {index} out of range (index holds {count} documents)")]
    DocIndexOutOfRange { index: usize, count: usize },

    #[error("unknown document id `{0}`")]
    UnknownDocId(String),

    #[error("unknown query id `{0}`")]
    UnknownQueryId(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("instance {index} has tied labels ({label}); sign(s1 - s2) is undefined")]
    TiedLabels { index: usize, label: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }

    /// Usage and I/O failures map to exit code 2, everything else to 1.
    pub fn is_usage_or_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse { .. } | Error::Config(_))
    }
}
