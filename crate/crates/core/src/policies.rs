//! Epsilon-greedy, UCB and Thompson sampling for two arms, with clipping.
//!
//! The policy is frozen within a batch: [`PolicySnapshot`] captures the
//! cumulative OLS state after batch `t - 1` and is used for every unit of
//! batch `t`. All three adaptive policies fall back to probability 1/2 while
//! either arm's cumulative Gram is singular.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, Result};
use crate::estimators::{BatchOlsFit, SufficientStats};
use crate::linalg::{factor_gram, Cholesky, Matrix};
use crate::scalar::{dot, Real};
use crate::Arm;

/// Sequence indexed by batch `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule<T> {
    Constant {
        value: T,
    },
    /// `max(floor, initial * t^-exponent)`.
    PowerDecay {
        initial: T,
        exponent: T,
        floor: T,
    },
}

impl<T: Real> Schedule<T> {
    pub fn constant(value: T) -> Self {
        Schedule::Constant { value }
    }

    pub fn value(&self, t: usize) -> T {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::PowerDecay { initial, exponent, floor } => {
                let t = T::of_usize(t.max(1));
                (initial * t.powf(-exponent)).max(floor)
            }
        }
    }

    /// Limit as `t -> infinity`.
    pub fn limit(&self) -> T {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::PowerDecay { initial, exponent, floor } => {
                if exponent > T::zero() {
                    floor
                } else {
                    initial.max(floor)
                }
            }
        }
    }

    pub fn is_non_increasing(&self, prefix: usize) -> bool {
        (1..prefix).all(|t| self.value(t + 1) <= self.value(t))
    }

    fn check_range(&self, prefix: usize, lo_open: T, hi: T, what: &str) -> Result<()> {
        ensure!(self.is_non_increasing(prefix), Config, "{what} schedule must be non-increasing");
        for t in 1..=prefix {
            let v = self.value(t);
            ensure!(v > lo_open && v <= hi, Config, "{what} schedule value {v} at t={t} outside ({lo_open}, {hi}]");
        }
        Ok(())
    }
}

/// Prefix length on which schedule monotonicity and ranges are checked.
pub const SCHEDULE_CHECK_PREFIX: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind<T> {
    UniformRandom,
    /// Greedy arm with probability `1 - p_t / 2`.
    EpsGreedy {
        eps: Schedule<T>,
    },
    /// Index `x^T beta_hat_a + c_t sqrt(x^T G_a^{-1} x)`.
    Ucb {
        c: Schedule<T>,
    },
    /// Gaussian posteriors `N(beta_hat_a, sigma^2 G_a^{-1})`.
    Thompson {
        sigma_prior: T,
    },
}

impl<T: Real> PolicyKind<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyKind::UniformRandom => Ok(()),
            PolicyKind::EpsGreedy { eps } => eps.check_range(SCHEDULE_CHECK_PREFIX, T::zero(), T::one(), "epsilon"),
            PolicyKind::Ucb { c } => {
                ensure!(c.is_non_increasing(SCHEDULE_CHECK_PREFIX), Config, "UCB schedule must be non-increasing");
                ensure!(c.value(SCHEDULE_CHECK_PREFIX) >= T::zero(), Config, "UCB schedule must be non-negative");
                Ok(())
            }
            PolicyKind::Thompson { sigma_prior } => {
                ensure!(*sigma_prior > T::zero(), Config, "Thompson sigma_prior must be positive");
                Ok(())
            }
        }
    }
}

/// Clip levels `p_t` in `(0, 1/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSchedule<T> {
    pub schedule: Schedule<T>,
}

impl<T: Real> ClipSchedule<T> {
    pub fn constant(p: T) -> Self {
        Self { schedule: Schedule::constant(p) }
    }

    pub fn level(&self, t: usize) -> T {
        self.schedule.value(t)
    }

    /// Limiting clip level `p`.
    pub fn floor(&self) -> T {
        self.schedule.limit()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.check_range(SCHEDULE_CHECK_PREFIX, T::zero(), T::lit(0.5), "clip")
    }
}

/// `min(max(prob, p_t), 1 - p_t)`.
pub fn clip<T: Real>(prob: T, p_t: T) -> Result<T> {
    ensure!(p_t > T::zero() && p_t <= T::lit(0.5), Config, "clip level {p_t} outside (0, 1/2]");
    ensure!(prob >= T::zero() && prob <= T::one(), Contract, "probability {prob} outside [0, 1]");
    Ok(prob.max(p_t).min(T::one() - p_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState<T> {
    pub gram: Matrix<T>,
    pub moment: Vec<T>,
    pub count: usize,
}

/// Cumulative sufficient statistics driving the policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState<T> {
    pub arms: [ArmState<T>; 2],
    /// Completed batches.
    pub batches: usize,
}

impl<T: Real> PolicyState<T> {
    pub fn new(dim: usize) -> Self {
        let arm = ArmState { gram: Matrix::zeros(dim, dim), moment: vec![T::zero(); dim], count: 0 };
        Self { arms: [arm.clone(), arm], batches: 0 }
    }

    pub fn dim(&self) -> usize {
        self.arms[0].moment.len()
    }

    pub fn arm(&self, arm: Arm) -> &ArmState<T> {
        &self.arms[arm.index()]
    }

    /// Unit-level accumulation of one completed batch.
    pub fn update(&mut self, contexts: &Matrix<T>, actions: &[Arm], rewards: &[T]) -> Result<()> {
        ensure!(contexts.cols() == self.dim(), Contract, "context dimension {} != {}", contexts.cols(), self.dim());
        ensure!(contexts.rows() == actions.len() && actions.len() == rewards.len(), Contract, "misaligned batch");
        for ((x, &a), &y) in contexts.iter_rows().zip(actions).zip(rewards) {
            let s = &mut self.arms[a.index()];
            s.gram.add_outer(x, T::one());
            for (m, &xi) in s.moment.iter_mut().zip(x) {
                *m = *m + xi * y;
            }
            s.count += 1;
        }
        self.batches += 1;
        Ok(())
    }

    /// Batch-level accumulation from a fit's Grams and moments. Used by the
    /// simulator and by [`PolicyState::replay`], so both produce identical
    /// floating point state.
    pub fn absorb(&mut self, fit: &BatchOlsFit<T>) -> Result<()> {
        ensure!(fit.dim() == self.dim(), Contract, "fit dimension {} != {}", fit.dim(), self.dim());
        for arm in Arm::BOTH {
            let f = fit.arm(arm);
            let s = &mut self.arms[arm.index()];
            s.gram.add_assign(&f.gram);
            for (m, &v) in s.moment.iter_mut().zip(&f.moment) {
                *m = *m + v;
            }
            s.count += f.count;
        }
        self.batches += 1;
        Ok(())
    }

    /// State after the first `upto` batches of `stats`.
    pub fn replay(dim: usize, stats: &SufficientStats<T>, upto: usize) -> Result<Self> {
        let mut s = Self::new(dim);
        for e in stats.entries.iter().take(upto) {
            s.absorb(&e.to_fit())?;
        }
        Ok(s)
    }

    /// Cumulative OLS for an arm, `None` while its Gram is singular.
    pub fn ols(&self, arm: Arm) -> Option<(Vec<T>, Cholesky<T>)> {
        let s = self.arm(arm);
        factor_gram(&s.gram).map(|c| (c.solve(&s.moment), c))
    }
}

#[derive(Debug, Clone)]
struct ArmPosterior<T> {
    beta: Vec<T>,
    chol: Cholesky<T>,
}

/// Policy frozen for one batch.
#[derive(Debug, Clone)]
pub struct PolicySnapshot<T> {
    kind: PolicyKind<T>,
    /// Batch the snapshot applies to.
    t: usize,
    arms: Option<[ArmPosterior<T>; 2]>,
}

impl<T: Real> PolicySnapshot<T> {
    pub fn new(kind: &PolicyKind<T>, state: &PolicyState<T>) -> Self {
        let arms = match kind {
            PolicyKind::UniformRandom => None,
            _ => match (state.ols(Arm::Arm0), state.ols(Arm::Arm1)) {
                (Some((b0, c0)), Some((b1, c1))) => {
                    Some([ArmPosterior { beta: b0, chol: c0 }, ArmPosterior { beta: b1, chol: c1 }])
                }
                _ => None,
            },
        };
        Self { kind: *kind, t: state.batches + 1, arms }
    }

    pub fn batch(&self) -> usize {
        self.t
    }

    /// Pre-clip probability of choosing arm 1 at context `x`.
    pub fn probability(&self, x: &[T]) -> T {
        let half = T::lit(0.5);
        let Some([a0, a1]) = &self.arms else {
            return half;
        };
        let pick = |u: T, v: T, hi: T, lo: T| {
            if u > v {
                hi
            } else if u < v {
                lo
            } else {
                half
            }
        };
        match self.kind {
            PolicyKind::UniformRandom => half,
            PolicyKind::EpsGreedy { eps } => {
                let p = eps.value(self.t);
                let h = p * half;
                pick(dot(x, &a1.beta), dot(x, &a0.beta), T::one() - h, h)
            }
            PolicyKind::Ucb { c } => {
                let ct = c.value(self.t);
                let i1 = dot(x, &a1.beta) + ct * a1.chol.inv_quad_form(x).max(T::zero()).sqrt();
                let i0 = dot(x, &a0.beta) + ct * a0.chol.inv_quad_form(x).max(T::zero()).sqrt();
                pick(i1, i0, T::one(), T::zero())
            }
            PolicyKind::Thompson { sigma_prior } => {
                let delta = dot(x, &a1.beta) - dot(x, &a0.beta);
                let var = sigma_prior * sigma_prior * (a1.chol.inv_quad_form(x) + a0.chol.inv_quad_form(x));
                if var <= T::zero() {
                    return pick(delta, T::zero(), T::one(), T::zero());
                }
                let z = (delta / var.sqrt()).as_f64();
                T::lit(standard_normal_cdf(z))
            }
        }
    }
}

pub(crate) fn standard_normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Pre-clip probability of arm 1 for `kind` in `state` at context `x`.
pub fn action_probability<T: Real>(kind: &PolicyKind<T>, state: &PolicyState<T>, x: &[T]) -> T {
    PolicySnapshot::new(kind, state).probability(x)
}

/// Monte Carlo version of the Thompson probability: the fraction of
/// posterior draws with `x^T beta_1 > x^T beta_0`. `None` while a Gram is
/// singular.
pub fn thompson_probability_mc<T: Real, R: Rng + ?Sized>(
    state: &PolicyState<T>,
    sigma_prior: T,
    x: &[T],
    draws: usize,
    rng: &mut R,
) -> Option<f64> {
    let (b0, c0) = state.ols(Arm::Arm0)?;
    let (b1, c1) = state.ols(Arm::Arm1)?;
    let d = state.dim();
    let mut wins = 0usize;
    let mut z = vec![T::zero(); d];
    let mut draw = |beta: &[T], chol: &Cholesky<T>, rng: &mut R| -> T {
        for v in z.iter_mut() {
            *v = T::lit(rng.sample::<f64, _>(StandardNormal));
        }
        // L^{-T} z has covariance G^{-1}.
        let w = solve_upper_transposed(chol.factor(), &z);
        beta.iter().zip(&w).map(|(&b, &wi)| b + sigma_prior * wi).zip(x).fold(T::zero(), |s, (v, &xi)| s + v * xi)
    };
    for _ in 0..draws {
        let s1 = draw(&b1, &c1, rng);
        let s0 = draw(&b0, &c0, rng);
        if s1 > s0 {
            wins += 1;
        }
    }
    Some(wins as f64 / draws as f64)
}

/// Solves `L^T w = z` for lower-triangular `L`.
fn solve_upper_transposed<T: Real>(l: &Matrix<T>, z: &[T]) -> Vec<T> {
    let d = z.len();
    let mut w = z.to_vec();
    for i in (0..d).rev() {
        let mut s = w[i];
        for k in i + 1..d {
            s = s - l[(k, i)] * w[k];
        }
        w[i] = s / l[(i, i)];
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Propensity<T> {
    pub action: Arm,
    pub pre_clip: T,
    pub post_clip: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchActions<T> {
    pub actions: Vec<Arm>,
    pub propensities: Vec<Propensity<T>>,
    pub clip_level: T,
}

/// Independent draws per unit from the clipped arm-1 probability under the
/// policy frozen at `state`.
pub fn select_actions<T: Real, R: Rng + ?Sized>(
    kind: &PolicyKind<T>,
    state: &PolicyState<T>,
    contexts: &Matrix<T>,
    clip_schedule: &ClipSchedule<T>,
    rng: &mut R,
) -> Result<BatchActions<T>> {
    ensure!(contexts.cols() == state.dim(), Contract, "context dimension {} != {}", contexts.cols(), state.dim());
    let snap = PolicySnapshot::new(kind, state);
    let p_t = clip_schedule.level(snap.batch());
    let mut actions = Vec::with_capacity(contexts.rows());
    let mut propensities = Vec::with_capacity(contexts.rows());
    for x in contexts.iter_rows() {
        let pre = snap.probability(x);
        let post = clip(pre, p_t)?;
        let u: f64 = rng.random();
        let action = Arm::from_indicator(T::lit(u) < post);
        actions.push(action);
        propensities.push(Propensity { action, pre_clip: pre, post_clip: post });
    }
    Ok(BatchActions { actions, propensities, clip_level: p_t })
}
