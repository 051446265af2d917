use thiserror::Error;

/// Errors produced by the kernel-flow library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KflowError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel k{kernel} produced a non-finite value (check theta{theta_index} = {theta_value})")]
    NonFiniteKernel {
        kernel: usize,
        theta_index: usize,
        theta_value: f64,
    },

    #[error("invalid parameter index: {0}")]
    InvalidParameter(String),

    #[error("factorization failed for a {size}x{size} system: {reason}")]
    Factorization { size: usize, reason: String },

    #[error("degenerate batch: denominator quadratic form is {0}")]
    DegenerateBatch(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration blew up at step {step}")]
    IntegrationBlowUp { step: usize },

    #[error("training aborted after {failures} failed epochs (budget {budget})")]
    TrainingAborted { failures: usize, budget: usize },

    #[error("cross-validation failed: {0}")]
    CrossValidation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(String),
}

impl KflowError {
    /// True for failures that originate in the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            KflowError::NonFiniteKernel { .. }
                | KflowError::Factorization { .. }
                | KflowError::DegenerateBatch(_)
                | KflowError::IntegrationBlowUp { .. }
                | KflowError::TrainingAborted { .. }
                | KflowError::CrossValidation(_)
        )
    }
}

impl KflowError {
    /// Library area the error comes from, for user-facing messages.
    pub fn module(&self) -> &'static str {
        match self {
            KflowError::NonFiniteKernel { .. } | KflowError::InvalidParameter(_) => "kernels",
            KflowError::Factorization { .. } | KflowError::DegenerateBatch(_) => "loss",
            KflowError::TrainingAborted { .. } => "optimizer",
            KflowError::CrossValidation(_) => "evaluation",
            KflowError::IntegrationBlowUp { .. } | KflowError::Data(_) | KflowError::Io(_) => "data",
            KflowError::DimensionMismatch(_) | KflowError::InvalidArgument(_) => "input",
        }
    }
}

impl From<std::io::Error> for KflowError {
    fn from(e: std::io::Error) -> Self {
        KflowError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KflowError>;
