use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum ThermoError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "free Hessian at the clamped origin has smallest eigenvalue {lambda_min:.6e} < lambda_floor {lambda_floor:.6e}"
    )]
    StiffnessViolation { lambda_min: f64, lambda_floor: f64 },

    #[error(
        "relaxation diverged at step {step} (|x| = {norm:.3e}); step size {step_size:.3e} must stay below 2/lambda_max = {bound:.3e}"
    )]
    Divergence {
        step: usize,
        norm: f64,
        step_size: f64,
        bound: f64,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("free Hessian is not positive definite at the evaluation point")]
    NotPositiveDefinite,

    #[error("free phase did not converge (gradient norm {0:.3e}); exact-equilibrium mode required")]
    NotConverged(f64),

    #[error("slope fit refused: {0}")]
    FitRefused(String),

    #[error("training diverged at step {step}: loss {loss:.3e}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ThermoError {
    /// True for errors caused by the configuration rather than the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ThermoError::InvalidConfig(_)
                | ThermoError::InvalidArgument(_)
                | ThermoError::DimensionMismatch { .. }
                | ThermoError::StiffnessViolation { .. }
                | ThermoError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, ThermoError>;
