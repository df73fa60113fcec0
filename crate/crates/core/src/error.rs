use thiserror::Error;

use crate::forward::SolveReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("evaluation error at x={x:?}, t={t}, u={u}: {message}")]
    Eval {
        x: [f64; 2],
        t: f64,
        u: f64,
        message: String,
    },

    #[error("linear solve breakdown at time level {level}: {message}")]
    Breakdown { level: usize, message: String },

    #[error("no convergence after {} iterations (last update {:e})", .report.iterations, .report.residuals.last().copied().unwrap_or(f64::NAN))]
    NotConverged { report: Box<SolveReport> },

    #[error("non-finite value at node {node}, time level {level}")]
    NonFinite { node: usize, level: usize },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
