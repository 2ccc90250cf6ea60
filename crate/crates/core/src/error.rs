//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem (shape or rank mismatch), tagged with the operator that raised it.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside an operator's documented numeric domain.
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// CTC target cannot be aligned within the given number of frames.
    #[error("infeasible alignment: target needs at least {needed} frames, got {got}")]
    InfeasibleAlignment { needed: usize, got: usize },

    /// Bad configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Problem with a dataset, corpus, or data file.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value or other numeric failure during training/evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }
}
