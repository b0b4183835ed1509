use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },

    #[error("{context}: missing field `{field}`")]
    MissingField { context: String, field: String },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("PLY error at byte {offset}: {message}")]
    Ply { offset: u64, message: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("problem too large for exhaustive search: {nodes} nodes (limit {limit})")]
    TooLarge { nodes: usize, limit: usize },

    #[error("no ground truth instances")]
    NoGroundTruth,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// True for errors caused by bad input files or arguments rather than a
    /// stage computation.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_usage(),
            Error::InvalidArgument(_)
            | Error::Io { .. }
            | Error::MissingFile { .. }
            | Error::MissingField { .. }
            | Error::Parse { .. }
            | Error::Ply { .. }
            | Error::Image { .. } => true,
            _ => false,
        }
    }
}
