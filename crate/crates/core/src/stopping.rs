//! Stopping rules.
//!
//! Pre-determined rules look only at the regret bound `U(t)` and are fixed
//! before any data arrives. Online rules look at the spectral norms of the
//! per-arm IVW covariance estimates. Every rule stops unconditionally at
//! `t_max`, flagging the cap.

use serde::{Deserialize, Serialize};

use crate::bounds::{regret_bound_time, BoundConstants};
use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

pub const DEFAULT_T_MAX: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule<T> {
    /// Stop once `U(t) - U(t+1) <= c n`.
    PredeterminedOpportunity { consts: BoundConstants<T> },
    /// Stop once `U(t) <= k`.
    PredeterminedThreshold { consts: BoundConstants<T>, k: T },
    /// Stop once both arms have `||Sigma_hat_{t,a}||_2 <= k`.
    OnlineThreshold { k: T },
    /// Stop once both arms have `||Sigma_hat_{t-1,a}|| - ||Sigma_hat_{t,a}|| <= c'`
    /// (or `<= c' n` when `scale_n` is set).
    OnlineOpportunity {
        c_prime: T,
        #[serde(default)]
        scale_n: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRuleSpec<T> {
    pub rule: StoppingRule<T>,
    pub t_max: usize,
}

impl<T: Real> StoppingRuleSpec<T> {
    pub fn new(rule: StoppingRule<T>) -> Self {
        Self { rule, t_max: DEFAULT_T_MAX }
    }

    pub fn with_cap(rule: StoppingRule<T>, t_max: usize) -> Self {
        Self { rule, t_max }
    }

    pub fn is_online(&self) -> bool {
        matches!(self.rule, StoppingRule::OnlineThreshold { .. } | StoppingRule::OnlineOpportunity { .. })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.t_max >= 1, Config, "t_max must be at least 1");
        match &self.rule {
            StoppingRule::PredeterminedOpportunity { consts } => check_predetermined(consts),
            StoppingRule::PredeterminedThreshold { consts, k } => {
                ensure!(*k > T::zero(), Config, "threshold k must be positive");
                check_predetermined(consts)
            }
            StoppingRule::OnlineThreshold { k } => {
                ensure!(*k >= T::zero(), Config, "threshold k must be non-negative");
                Ok(())
            }
            StoppingRule::OnlineOpportunity { c_prime, scale_n } => {
                ensure!(*c_prime > T::zero(), Config, "c' must be positive");
                ensure!(scale_n.is_none_or(|n| n >= 1), Config, "scale_n must be at least 1");
                Ok(())
            }
        }
    }
}

fn check_predetermined<T: Real>(consts: &BoundConstants<T>) -> Result<()> {
    consts.validate()?;
    ensure!(consts.p_floor > T::zero(), Config, "pre-determined rules need a positive clip limit");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDiagnostics<T> {
    Bounds {
        u_t: T,
        u_next: T,
    },
    /// Variance norms indexed by arm.
    Norms {
        current: [T; 2],
        previous: Option<[T; 2]>,
    },
    /// No variance estimate available at this batch.
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopDecision<T> {
    pub t: usize,
    pub stop: bool,
    pub cap_hit: bool,
    /// Online opportunity rule without a previous variance estimate.
    #[serde(default)]
    pub insufficient_history: bool,
    pub diagnostics: StopDiagnostics<T>,
}

/// Largest absolute eigenvalue of a symmetric matrix (the largest eigenvalue
/// for PSD input).
pub fn spectral_norm<T: Real>(m: &Matrix<T>) -> Result<T> {
    ensure!(m.is_square(), Contract, "spectral norm of a {}x{} matrix", m.rows(), m.cols());
    ensure!(m.is_symmetric(T::lit(1e-9)), Contract, "spectral norm input is not symmetric");
    if m.rows() == 0 {
        return Ok(T::zero());
    }
    let e = m.sym_eigen();
    Ok(e.max().abs().max(e.min().abs()))
}

pub fn norms<T: Real>(pair: &[Matrix<T>; 2]) -> Result<[T; 2]> {
    Ok([spectral_norm(&pair[0])?, spectral_norm(&pair[1])?])
}

/// Decides whether to stop after batch `t`. `current` and `previous` are the
/// per-arm covariance estimates at `t` and `t - 1`; pre-determined rules
/// ignore them.
pub fn evaluate<T: Real>(
    spec: &StoppingRuleSpec<T>,
    t: usize,
    current: Option<&[Matrix<T>; 2]>,
    previous: Option<&[Matrix<T>; 2]>,
) -> Result<StopDecision<T>> {
    let cur = current.map(norms).transpose()?;
    let prev = previous.map(norms).transpose()?;
    evaluate_norms(spec, t, cur, prev)
}

/// [`evaluate`] on precomputed spectral norms.
pub fn evaluate_norms<T: Real>(
    spec: &StoppingRuleSpec<T>,
    t: usize,
    current: Option<[T; 2]>,
    previous: Option<[T; 2]>,
) -> Result<StopDecision<T>> {
    ensure!(t >= 1, Contract, "batch index must be at least 1");
    let cap_hit = t >= spec.t_max;
    let mut insufficient_history = false;
    let (rule_stop, diagnostics) = match spec.rule {
        StoppingRule::PredeterminedOpportunity { consts } => {
            let (u_t, u_next) = (regret_bound_time(t, &consts)?, regret_bound_time(t + 1, &consts)?);
            let cn = consts.c * T::of_usize(consts.n);
            (u_t - u_next <= cn, StopDiagnostics::Bounds { u_t, u_next })
        }
        StoppingRule::PredeterminedThreshold { consts, k } => {
            let (u_t, u_next) = (regret_bound_time(t, &consts)?, regret_bound_time(t + 1, &consts)?);
            (u_t <= k, StopDiagnostics::Bounds { u_t, u_next })
        }
        StoppingRule::OnlineThreshold { k } => match current {
            Some(c) => (c[0] <= k && c[1] <= k, StopDiagnostics::Norms { current: c, previous }),
            None => (false, StopDiagnostics::Unavailable),
        },
        StoppingRule::OnlineOpportunity { c_prime, scale_n } => {
            let limit = scale_n.map_or(c_prime, |n| c_prime * T::of_usize(n));
            match (current, previous) {
                (Some(c), Some(p)) if t >= 2 => {
                    // A rising norm gives a negative decrement, which counts as small.
                    let stop = (0..2).all(|a| p[a] - c[a] <= limit);
                    (stop, StopDiagnostics::Norms { current: c, previous: Some(p) })
                }
                (Some(c), _) => {
                    insufficient_history = true;
                    (false, StopDiagnostics::Norms { current: c, previous: None })
                }
                (None, _) => (false, StopDiagnostics::Unavailable),
            }
        }
    };
    Ok(StopDecision { t, stop: rule_stop || cap_hit, cap_hit, insufficient_history, diagnostics })
}

/// Scans `t = 1, 2, ...` for the first stop of a pre-determined rule.
pub fn scan_predetermined<T: Real>(spec: &StoppingRuleSpec<T>) -> Result<StopDecision<T>> {
    if spec.is_online() {
        return Err(Error::Unsupported("online rules depend on data and cannot be scanned".into()));
    }
    spec.validate()?;
    for t in 1..=spec.t_max {
        let d = evaluate_norms(spec, t, None, None)?;
        if d.stop {
            return Ok(d);
        }
    }
    unreachable!("evaluate stops at t_max")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormStop<T> {
    pub t_star: T,
    /// Predicted cost-adjusted regret at `t_star`.
    pub creg_star: T,
}

/// Large-`t` approximations for `lambda = 1` and constant clip level `p`:
/// opportunity cost stops near `sqrt(K'' / (c n))` with regret
/// `K'' ln t* + c n t*`; threshold stops near `K' / (p^2 n k)` with regret
/// `K' c / (p^2 k)`.
pub fn closed_form_stop_time<T: Real>(spec: &StoppingRuleSpec<T>) -> Result<ClosedFormStop<T>> {
    let consts = match &spec.rule {
        StoppingRule::PredeterminedOpportunity { consts } | StoppingRule::PredeterminedThreshold { consts, .. } => {
            consts
        }
        _ => return Err(Error::Unsupported("closed-form stop times exist only for pre-determined rules".into())),
    };
    if consts.lambda != T::one() {
        return Err(Error::Unsupported(format!("closed-form stop time needs lambda = 1, got {}", consts.lambda)));
    }
    check_predetermined(consts)?;
    let n = T::of_usize(consts.n);
    let p2 = consts.p_floor * consts.p_floor;
    match spec.rule {
        StoppingRule::PredeterminedOpportunity { .. } => {
            ensure!(consts.c > T::zero(), Domain, "opportunity-cost stop time needs a positive sampling cost");
            let kpp = consts.k_double_prime();
            let t_star = (kpp / (consts.c * n)).sqrt();
            Ok(ClosedFormStop { t_star, creg_star: kpp * t_star.ln() + consts.c * n * t_star })
        }
        StoppingRule::PredeterminedThreshold { k, .. } => Ok(ClosedFormStop {
            t_star: consts.k_prime / (p2 * n * k),
            creg_star: consts.k_prime * consts.c / (p2 * k),
        }),
        _ => unreachable!(),
    }
}
