//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Broad category of an [`Error`], used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration supplied by the caller.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// A numeric quantity degenerated (empty normalizer, no matching trajectory).
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("action out of range: trajectory {traj}, t={t}, action {action} with K={num_arms}")]
    ActionOutOfRange {
        traj: usize,
        t: usize,
        action: usize,
        num_arms: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nuisance component unavailable: {component} at t={t}, arm={arm}, fold={fold}")]
    Unavailable {
        component: &'static str,
        t: usize,
        arm: usize,
        fold: usize,
    },

    #[error("empty regression subset: {0}")]
    EmptySubset(String),

    #[error("degenerate normalization at t={t}: {what}")]
    DegenerateNormalization { t: usize, what: &'static str },

    #[error("no trajectory matches policy {0}")]
    NoMatchingTrajectory(String),

    #[error("every grid policy failed to evaluate: {0}")]
    AllPoliciesFailed(String),

    #[error("enumeration budget exceeded: {needed} paths > {budget}")]
    EnumerationBudget { needed: u128, budget: u128 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::DegenerateNormalization { .. } | Error::NoMatchingTrajectory(_) | Error::AllPoliciesFailed(_) => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
