use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("unknown tape node {0}")]
    UnknownNode(usize),
    #[error("backward has not run on this tape")]
    BackwardNotRun,
    #[error("input norm {norm} exceeds the declared bound {bound}")]
    InputTooLarge { norm: f64, bound: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no first-order descent direction (|C|_F = {norm:e})")]
    NoDescentDirection { norm: f64 },
    #[error("mean activation gradient is zero; alignment bound undefined")]
    ZeroMeanSignal,
    #[error("invalid covariance model: {0}")]
    InvalidCovariance(String),
    #[error("recursion left the positive range at step {step}")]
    StepTooLarge { step: usize },
    #[error("power-law envelope requires beta > 0")]
    BetaZero,
    #[error("insufficient data for a fit: {0}")]
    InsufficientFitData(String),
    #[error("target accuracy {target} is not reachable below m = 2^60")]
    Unsatisfiable { target: f64 },
    #[error("training diverged at step {step}")]
    DivergedTraining { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
