use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("case {0} has no split tag")]
    MissingSplitTag(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("lambda grid is empty")]
    EmptyGrid,

    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("image for case {case_id} is unreadable: {reason}")]
    ImageUnreadable { case_id: String, reason: String },

    #[error("verdict given for label {0:?} which is outside the prediction set")]
    VerdictOutsideSet(String),

    #[error("review incomplete: no verdict for flagged label {0:?}")]
    IncompleteReview(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
