use thiserror::Error;

use crate::geodesic::GeodesicCurve;

pub type Result<T> = std::result::Result<T, LandError>;

#[derive(Debug, Error)]
pub enum LandError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("geodesic integration exhausted {steps} steps before reaching t = 1 (reached t = {reached:.4})")]
    StepLimit { steps: usize, reached: f64, partial: Box<GeodesicCurve> },

    #[error("geodesic integration diverged at t = {t:.4}")]
    Divergence { t: f64 },

    #[error("logarithm map did not converge after {iterations} iterations (best residual {residual:.3e})")]
    BvpNotConverged { iterations: usize, residual: f64 },

    #[error("too many logarithm map failures: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("all {0} Monte Carlo samples failed to integrate")]
    AllSamplesFailed(usize),

    #[error("covariance factor lost rank (|det A| = {0:.3e})")]
    RankLoss(f64),

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("importance weights degenerate: effective sample size {ess:.1} < {needed}; increase oversampling")]
    DegenerateWeights { ess: f64, needed: usize },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl LandError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LandError::InvalidInput(msg.into())
    }
}
