use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt study at {}: {reason}", path.display())]
    CorruptStudy { path: PathBuf, reason: String },
    #[error("pixel ({x}, {y}) is not in the myocardium at frame {t}")]
    NotInMyocardium { t: usize, x: f64, y: f64 },
    #[error("no myocardium in frame {t}")]
    NoMyocardium { t: usize },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("training failed: {0}")]
    TrainingFailure(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MvmError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] mvm_nn::NnError),
}

pub type Result<T> = std::result::Result<T, MvmError>;

pub(crate) fn invalid(msg: impl Into<String>) -> MvmError {
    MvmError::InvalidArgument(msg.into())
}

impl MvmError {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> MvmError {
        MvmError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
