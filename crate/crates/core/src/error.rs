use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("row_softmax: row {row} is entirely masked")]
    DegenerateMask { row: usize },

    #[error("target id {target} at position {position} is outside vocabulary of size {vocab}")]
    TargetOutOfRange {
        target: usize,
        position: usize,
        vocab: usize,
    },

    #[error("cross_entropy: no valid target positions")]
    NoValidTargets,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph")]
    BackwardAlreadyRun,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid model config: {0}")]
    InvalidModel(String),

    #[error("invalid parameter plan: {0}")]
    InvalidPlan(String),

    #[error("invalid optimizer config: {0}")]
    InvalidOptimizer(String),

    #[error("schedule step {step} exceeds total steps {total}")]
    ScheduleOverrun { step: u64, total: u64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid run config: {0}")]
    InvalidRun(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
