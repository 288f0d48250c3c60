use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("value {value} out of range [{min}, {max}]")]
    Range { value: i64, min: i64, max: i64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("too many failures: {failed} of {total} items could not be scored")]
    TooManyFailures { failed: usize, total: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
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

    /// True for errors caused by bad inputs or configuration rather than by
    /// the environment or a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Format(_)
                | Error::Range { .. }
                | Error::DegenerateInput(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
