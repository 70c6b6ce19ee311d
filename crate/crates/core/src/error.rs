use thiserror::Error;

use crate::mene::SegmentRecord;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum EneError {
    #[error("matrix is numerically singular (pivot {pivot:.3e} at index {index})")]
    SingularMatrix { index: usize, pivot: f64 },

    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step {step}: {count} active constraints exceed the control dimension {control_dim}")]
    TooManyActive {
        step: usize,
        count: usize,
        control_dim: usize,
    },

    #[error("step {step}: active constraint Jacobian C_u is rank deficient")]
    RankDeficientActiveSet { step: usize },

    #[error("step {step}: Z_uu is not positive definite (try a Levenberg shift on H_uu)")]
    ZuuNotPositive { step: usize },

    #[error("step {step}: control-space KKT block is singular")]
    SingularKkt { step: usize },

    #[error("nominal solve did not converge (best KKT norm {best_kkt_norm:.3e})")]
    SolveFailed { best_kkt_norm: f64 },

    #[error("segment budget of {budget} exhausted after {} segments", log.len())]
    SegmentBudgetExceeded {
        budget: usize,
        log: Vec<SegmentRecord>,
    },

    #[error("{path}: {message}")]
    File { path: String, message: String },

    #[error("activity flip cycle at step {step}, constraint {constraint}")]
    CycleDetected { step: usize, constraint: usize },
}

pub type Result<T> = std::result::Result<T, EneError>;
