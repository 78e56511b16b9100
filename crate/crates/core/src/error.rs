use thiserror::Error;

/// Errors produced by the registration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("point lies on the principal plane (projected to infinity)")]
    AtInfinity,

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("projection matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("pose refinement failed: {0}")]
    RefinementFailed(String),

    #[error("pose pair is incomparable (empty visibility set)")]
    Incomparable,

    #[error("point cloud alignment failed: {0}")]
    Alignment(String),

    #[error("unknown scene name: {0}")]
    UnknownScene(String),

    #[error("parse error in {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub fn parse(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
