use thiserror::Error;

use crate::mild::SolveReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no convergence: {message}")]
    Convergence { message: String, report: Box<SolveReport> },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
