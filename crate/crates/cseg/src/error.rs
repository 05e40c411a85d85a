//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by volume handling, training, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A training set does not satisfy the preconditions of the learner.
    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),

    /// A numeric computation produced non-finite values.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// Thresholding produced no candidate region.
    #[error("no candidate region: {0}")]
    NoCandidate(String),

    /// Recall is undefined because the reference mask is empty.
    #[error("undefined recall: ground-truth mask is empty")]
    UndefinedRecall,

    /// Surface distances are undefined because a mask is empty.
    #[error("undefined distance: {0} mask has no voxels")]
    UndefinedDistance(&'static str),

    /// A statistical test degenerated (e.g. all paired differences are zero).
    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    /// A persisted artifact is malformed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
