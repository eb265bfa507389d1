use std::io;

use crate::geometry::PoincarePoint;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("failed to converge after {iterations} iterations (last step {last_step:e})")]
    Convergence {
        iterations: usize,
        last_step: f64,
        last: PoincarePoint,
    },

    #[error("class {0} has a zero normal vector")]
    DegenerateClass(usize),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("unsupported in {mode} mode: {what}")]
    UnsupportedMode { mode: &'static str, what: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(csv::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                _ => unreachable!("checked to be an I/O error"),
            }
        } else {
            Error::Csv(e)
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
