use thiserror::Error;

/// Errors surfaced by the modelling, identification and control layers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("collision: gap {gap:.3} m <= 0 for vehicle {vehicle} at t = {time:.2} s")]
    Collision { vehicle: u64, time: f64, gap: f64 },

    #[error("leading-velocity profile evaluated at t = {t:.3} s outside [0, {duration:.3}] s")]
    ProfileOutOfRange { t: f64, duration: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("zero-variance feature `{0}` in training split")]
    ZeroVariance(String),

    #[error("rank-deficient lifted data: {deficient} dimension(s) unresolved (rank {rank} of {needed})")]
    RankDeficient {
        rank: usize,
        needed: usize,
        deficient: usize,
    },

    #[error("insufficient data: {got} snapshot pairs, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("QP error: {0}")]
    Qp(String),

    #[error("QP iteration cap {cap} exceeded (best KKT residual {residual:.3e})")]
    QpIterationCap { cap: usize, residual: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("missing context window for vehicle {0}")]
    MissingContext(u64),

    #[error("training diverged: loss became non-finite at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
