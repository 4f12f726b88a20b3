//! Error type shared by every module in the crate.

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hermitian (max asymmetry {asymmetry:.3e})")]
    NotHermitian { asymmetry: f64 },

    #[error("matrix is numerically singular (pivot {pivot} = {value:.3e})")]
    Singular { pivot: usize, value: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("channel of user {user} is identically zero")]
    DegenerateChannel { user: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("too many labelling failures: {dropped} of {total} samples dropped")]
    LabelDropRate { dropped: usize, total: usize },

    #[error("slot {slot} is beyond the schedule horizon of {horizon} slots")]
    OutOfHorizon { slot: usize, horizon: usize },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
