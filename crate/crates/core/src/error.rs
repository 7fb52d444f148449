use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("operation `{0}` has no differentiable backward rule")]
    UnsupportedOp(&'static str),

    /// The oracle refused a query because its budget is spent.
    #[error("query budget exhausted after {used} queries")]
    BudgetExceeded { used: u64 },

    #[error("malformed frame: {0}")]
    Malformed(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("incompatible weights: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A failure while attacking one image of a campaign.
    #[error("image {index}: {source}")]
    Image {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Net(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
