use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid shape {0:?}: extents must be positive")]
    EmptyShape(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("score evaluation returned non-finite values at step {step}")]
    SamplerDiverged { step: usize },
    #[error("non-finite loss for timesteps {tau:?}")]
    NonFiniteLoss { tau: Vec<f64> },
    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial {initial} for 100 steps")]
    Diverged { step: u64, loss: f64, initial: f64 },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("index {index} out of range ({len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
