use thiserror::Error;

use crate::Arm;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user configuration (bad spec, out-of-range parameter).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller violated a function contract (dimension mismatch, asymmetric input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Argument outside the mathematical domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimator unavailable for arm {arm}: {reason}")]
    EstimatorUnavailable { arm: Arm, reason: String },

    #[error("conditioning event infeasible: no acceptances in {attempts} attempts")]
    InfeasibleConditioning { attempts: usize },

    #[error("unsupported case: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {{
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    }};
}
pub(crate) use ensure;
