use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum TascError {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("fit failed: {}", .causes.join("; "))]
    Fit { causes: Vec<String> },

    #[error("solver did not converge (residual {residual:.3e}): {message}")]
    Solver { residual: f64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TascError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TascError::Config(msg.into())
    }

    pub(crate) fn numerical(step: usize, msg: impl Into<String>) -> Self {
        TascError::Numerical {
            step,
            message: msg.into(),
        }
    }

    /// Attach a step index to a numerical error raised without one.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            TascError::Numerical { message, .. } => TascError::Numerical { step, message },
            other => other,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TascError::Numerical { .. } | TascError::Fit { .. } | TascError::Solver { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TascError>;
