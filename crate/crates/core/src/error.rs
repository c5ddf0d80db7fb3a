use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch: expected {expected} elements, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("cannot resolve wildcard dimension in {dims:?} for {len} elements")]
    BadWildcard { dims: Vec<i64>, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid dims {0:?}: every dimension must be >= 1 and order >= 1")]
    InvalidDims(Vec<usize>),

    #[error("input contains NaN or infinite values")]
    NonFinite,

    #[error("Jacobi SVD did not converge after {sweeps} sweeps")]
    DidNotConverge { sweeps: usize },

    #[error("factor product mismatch: {factors:?} multiply to {product}, expected {expected}")]
    FactorProductMismatch {
        factors: Vec<usize>,
        product: usize,
        expected: usize,
    },

    #[error("bad bond cap: {0}")]
    BadBondCap(String),

    #[error("slot {0} is already factored")]
    AlreadyFactored(String),

    #[error("plan does not match slot: {0}")]
    PlanMismatch(String),

    #[error("no gradient accumulator for slot {0}")]
    MissingAccumulator(String),

    #[error("unknown slot {0}")]
    UnknownSlot(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for invalid input, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SizeMismatch { .. }
            | Error::BadWildcard { .. }
            | Error::ShapeMismatch(_)
            | Error::InvalidDims(_)
            | Error::NonFinite
            | Error::FactorProductMismatch { .. }
            | Error::BadBondCap(_)
            | Error::AlreadyFactored(_)
            | Error::PlanMismatch(_)
            | Error::UnknownSlot(_)
            | Error::Config(_)
            | Error::Format { .. }
            | Error::Json(_) => 2,
            Error::DidNotConverge { .. }
            | Error::MissingAccumulator(_)
            | Error::NonFiniteLoss { .. }
            | Error::Io(_) => 1,
        }
    }
}
