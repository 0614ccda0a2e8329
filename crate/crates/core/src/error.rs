//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("subject `{subject}`: non-binary response {value} at time {time}")]
    NonBinaryResponse {
        subject: String,
        time: usize,
        value: String,
    },

    #[error("subject `{subject}`: duplicate row at time {time}")]
    DuplicateTime { subject: String, time: usize },

    #[error("subject `{subject}`: non-monotone/gapped pattern (times must be contiguous from 1)")]
    GappedTimes { subject: String },

    #[error("non-monotone missingness indicators (a 0 follows a 1)")]
    NonMonotoneIndicators,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no chain law stored for stratum s={0}")]
    UnseenStratum(usize),

    #[error("subject `{0}`: degenerate likelihood (all trajectories have zero probability)")]
    DegenerateLikelihood(String),

    #[error("brute-force guard exceeded: {states}^{len} trajectories")]
    BruteForceGuard { states: usize, len: usize },

    #[error("inner Hessian is singular even after ridge damping")]
    SingularHessian,

    #[error("all random starts ended in a degenerate likelihood")]
    AllStartsDegenerate,

    #[error("log-likelihood decreased at iteration {iter}: {prev} -> {curr}")]
    MonotonicityViolation { iter: usize, prev: f64, curr: f64 },

    #[error("AICc/AICu undefined: need n > k + 1 (n = {n}, k = {k})")]
    CriteriaUndefined { n: usize, k: usize },

    #[error("classification index H is undefined for a single state")]
    SingleStateH,

    #[error("bootstrap requires at least one replicate (B = 0)")]
    EmptyBootstrap,

    #[error("fit did not converge")]
    NotConverged,
}
