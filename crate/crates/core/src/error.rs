use std::io;

use thiserror::Error;

/// Errors raised across the laboratory.
///
/// Variants map onto the distinct failure classes of the pipeline; the CLI
/// turns each class into its own exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate size: {0}")]
    DegenerateSize(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wraps a protocol error with the stage it occurred in.
    pub fn at_stage(self, stage: usize) -> Self {
        match self {
            Error::Protocol(m) => Error::Protocol(format!("stage {stage}: {m}")),
            other => other,
        }
    }

    /// Process exit code used by the `cilab` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Protocol(_) => 3,
            Error::Integrity(_) | Error::Format(_) => 4,
            Error::Io { .. } => 5,
            Error::Dimension(_)
            | Error::DegenerateSize(_)
            | Error::UndefinedSimilarity(_)
            | Error::Normalization(_)
            | Error::Parameter(_) => 6,
        }
    }
}
