//! Batched two-arm linear contextual bandits with early stopping.
//!
//! Each batch of `n` units is assigned by a sampling policy, fitted by
//! per-batch OLS, and pooled across batches with an inverse-variance-weighted
//! (IVW) estimator. Stopping rules decide when to end the experiment, either
//! from a pre-computed regret bound or from the estimated covariance, and
//! [`inference`] produces intervals that condition on the stop time.
//!
//! The math modules are generic over the scalar type through [`Real`]; the
//! type aliases at the crate root fix it to `f64`. The experiment
//! [`harness`] works in `f64` only.

pub mod bounds;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod policies;
pub mod rng;
pub mod scalar;
pub mod stopping;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use scalar::Real;

/// Treatment arm: `Arm1` is treatment (`a = 1`), `Arm0` control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Arm {
    Arm0,
    Arm1,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Arm0, Arm::Arm1];

    pub fn index(self) -> usize {
        match self {
            Arm::Arm0 => 0,
            Arm::Arm1 => 1,
        }
    }

    pub fn from_indicator(treated: bool) -> Self {
        if treated {
            Arm::Arm1
        } else {
            Arm::Arm0
        }
    }

    pub fn other(self) -> Self {
        match self {
            Arm::Arm0 => Arm::Arm1,
            Arm::Arm1 => Arm::Arm0,
        }
    }
}

impl From<Arm> for u8 {
    fn from(a: Arm) -> u8 {
        a.index() as u8
    }
}

impl TryFrom<u8> for Arm {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Arm::Arm0),
            1 => Ok(Arm::Arm1),
            _ => Err(format!("arm must be 0 or 1, got {v}")),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

pub type Matrix = linalg::Matrix<f64>;
pub type ContextSpec = model::ContextSpec<f64>;
pub type TrueModel = model::TrueModel<f64>;
pub type BatchOlsFit = estimators::BatchOlsFit<f64>;
pub type IvwEstimate = estimators::IvwEstimate<f64>;
pub type PolicyKind = policies::PolicyKind<f64>;
pub type ClipSchedule = policies::ClipSchedule<f64>;
pub type BoundConstants = bounds::BoundConstants<f64>;
pub type StoppingRule = stopping::StoppingRule<f64>;
pub type StoppingRuleSpec = stopping::StoppingRuleSpec<f64>;
pub type StopDecision = stopping::StopDecision<f64>;
