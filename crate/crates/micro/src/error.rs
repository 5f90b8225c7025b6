use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MicroError {
    #[error("density {density} outside attainable range [0, {max})")]
    OutOfRange { density: f64, max: f64 },
    #[error("site measure truncation exceeds hard cap {0}")]
    Truncation(usize),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("rate function: {0}")]
    InvalidRate(String),
    #[error("two-species rate condition violated (mismatch {mismatch:e} at n = {n}, m = {m})")]
    RateCondition { mismatch: f64, n: u64, m: u64 },
    #[error("total event rate is not finite ({0})")]
    RateOverflow(f64),
    #[error("event cap {0} exceeded")]
    EventCap(u64),
    #[error("blow-up at site {site}: value {value} at t = {time}")]
    BlowUp { site: usize, value: f64, time: f64 },
    #[error("at least {needed} replicas required, got {got}")]
    InsufficientReplicas { needed: usize, got: usize },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error(transparent)]
    Core(#[from] relent_core::Error),
}

pub type Result<T> = std::result::Result<T, MicroError>;
