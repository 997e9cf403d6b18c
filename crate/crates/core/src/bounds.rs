//! Regret upper bounds and cost-adjusted regret.
//!
//! `B_t = sqrt(K / (n t p_t^2))` bounds the estimation error with
//! probability `1 - delta`; the learned policy then has regret at most
//! `(2 B_t L)^(1 + lambda) M`. With `K' = (2 L sqrt(K))^(1 + lambda) M` this is
//! `K' (n t p_t^2)^(-(1 + lambda) / 2)`.
//!
//! `L` here multiplies the estimation error norm, so it must be the context
//! bound in the dual norm of the one `K` was calibrated in. The harness uses
//! Euclidean errors and `L = sqrt(d) * L_sup` (see [`euclidean_context_bound`]).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants<T> {
    /// Context bound `L` matching the error norm.
    pub l_bound: T,
    /// Margin exponent `lambda`.
    pub lambda: T,
    /// Margin constant `M`.
    pub m: T,
    pub d: usize,
    pub sigma: T,
    pub delta: T,
    /// Tail constant `K = log(delta / C1) / (-C2)`.
    pub k: T,
    /// `K' = (2 L sqrt(K))^(1 + lambda) M`.
    pub k_prime: T,
    /// Unit sampling cost.
    pub c: T,
    /// Batch size.
    pub n: usize,
    /// Clip limit `p`.
    pub p_floor: T,
}

/// Inputs to [`BoundConstants::new`]; `k_prime` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams<T> {
    pub l_bound: T,
    pub lambda: T,
    pub m: T,
    pub d: usize,
    pub sigma: T,
    pub delta: T,
    pub k: T,
    pub c: T,
    pub n: usize,
    pub p_floor: T,
}

pub fn k_prime_from<T: Real>(l_bound: T, k: T, lambda: T, m: T) -> T {
    (T::lit(2.0) * l_bound * k.sqrt()).powf(T::one() + lambda) * m
}

/// Inverse of [`k_prime_from`] in `K`.
pub fn k_for_k_prime<T: Real>(k_prime: T, l_bound: T, lambda: T, m: T) -> T {
    let root = (k_prime / m).powf(T::one() / (T::one() + lambda)) / (T::lit(2.0) * l_bound);
    root * root
}

pub fn euclidean_context_bound<T: Real>(d: usize, l_sup: T) -> T {
    T::of_usize(d).sqrt() * l_sup
}

impl<T: Real> BoundConstants<T> {
    pub fn new(p: BoundParams<T>) -> Result<Self> {
        let c = Self {
            l_bound: p.l_bound,
            lambda: p.lambda,
            m: p.m,
            d: p.d,
            sigma: p.sigma,
            delta: p.delta,
            k: p.k,
            k_prime: k_prime_from(p.l_bound, p.k, p.lambda, p.m),
            c: p.c,
            n: p.n,
            p_floor: p.p_floor,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.l_bound > T::zero(), Config, "L must be positive");
        ensure!(self.lambda > T::zero(), Config, "lambda must be positive");
        ensure!(self.m > T::zero(), Config, "M must be positive");
        ensure!(self.d >= 1, Config, "d must be at least 1");
        ensure!(self.sigma >= T::zero(), Config, "sigma must be non-negative");
        ensure!(self.delta > T::zero() && self.delta < T::one(), Config, "delta must lie in (0, 1)");
        ensure!(self.k > T::zero() && self.k.is_finite(), Config, "K must be positive and finite");
        ensure!(self.c >= T::zero(), Config, "sampling cost must be non-negative");
        ensure!(self.n >= 1, Config, "batch size must be at least 1");
        ensure!(self.p_floor >= T::zero() && self.p_floor <= T::lit(0.5), Config, "clip limit must lie in [0, 1/2]");
        let recomputed = k_prime_from(self.l_bound, self.k, self.lambda, self.m);
        ensure!(
            (recomputed - self.k_prime).abs() <= T::lit(1e-12) * recomputed.abs().max(T::one()),
            Config,
            "stored K' {} disagrees with (2 L sqrt(K))^(1+lambda) M = {recomputed}",
            self.k_prime
        );
        Ok(())
    }

    /// `K'' = K' / (n p^2)`.
    pub fn k_double_prime(&self) -> T {
        self.k_prime / (T::of_usize(self.n) * self.p_floor * self.p_floor)
    }
}

/// `sqrt(K / (t p_t^2))`, or `sqrt(K / (n t p_t^2))` when `batched`.
pub fn tail_radius<T: Real>(t: usize, p_t: T, consts: &BoundConstants<T>, batched: bool) -> Result<T> {
    ensure!(t >= 1, Domain, "batch index must be at least 1");
    ensure!(p_t > T::zero() && p_t <= T::lit(0.5), Domain, "clip probability {p_t} outside (0, 1/2]");
    let units = if batched { T::of_usize(consts.n) } else { T::one() };
    Ok((consts.k / (units * T::of_usize(t) * p_t * p_t)).sqrt())
}

/// `(2 B L)^(1 + lambda) M`.
pub fn regret_bound_from_radius<T: Real>(radius: T, consts: &BoundConstants<T>) -> T {
    (T::lit(2.0) * radius * consts.l_bound).powf(T::one() + consts.lambda) * consts.m
}

/// Batched regret bound `U(t)` at clip level `p_t`.
pub fn regret_bound_time_at<T: Real>(t: usize, p_t: T, consts: &BoundConstants<T>) -> Result<T> {
    Ok(regret_bound_from_radius(tail_radius(t, p_t, consts, true)?, consts))
}

/// Batched regret bound `U(t)` at the clip limit `p`.
pub fn regret_bound_time<T: Real>(t: usize, consts: &BoundConstants<T>) -> Result<T> {
    regret_bound_time_at(t, consts.p_floor, consts)
}

/// `sqrt(d ||V||_2 / delta)`: with probability `1 - delta` an unbiased
/// estimator with covariance `V` lies within this Euclidean distance of its mean.
pub fn chebyshev_radius<T: Real>(d: usize, v_norm: T, delta: T) -> Result<T> {
    ensure!(v_norm >= T::zero(), Domain, "covariance norm must be non-negative");
    ensure!(delta > T::zero() && delta <= T::one(), Domain, "delta {delta} outside (0, 1]");
    Ok((T::of_usize(d) * v_norm / delta).sqrt())
}

/// `M (2 L sqrt(d k / delta))^(1 + lambda)` for covariance norm bound `k`.
pub fn regret_bound_from_variance<T: Real>(k: T, consts: &BoundConstants<T>) -> Result<T> {
    Ok(regret_bound_from_radius(chebyshev_radius(consts.d, k, consts.delta)?, consts))
}

/// Two-arm version: each arm's radius at `delta / 2`, so both hold jointly
/// with probability `1 - delta`.
pub fn regret_bound_from_variance_union<T: Real>(k: T, consts: &BoundConstants<T>) -> Result<T> {
    let r = chebyshev_radius(consts.d, k, consts.delta / T::lit(2.0))?;
    Ok(regret_bound_from_radius(r, consts))
}

/// Extended real: `+inf` is an explicit variant, never a float special value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtReal<T> {
    Finite(T),
    Infinite,
}

impl<T: Real> ExtReal<T> {
    pub fn finite(&self) -> Option<T> {
        match *self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, ExtReal::Infinite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode<T> {
    /// `U + c n t`.
    Additive,
    /// `inf * 1{U > k} + c n t`.
    Threshold { k: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostAdjustedRegret<T> {
    pub value: ExtReal<T>,
    pub mode: CostMode<T>,
    pub bound: T,
    pub cost: T,
}

pub fn cost_adjusted_regret<T: Real>(
    bound: T,
    t: usize,
    consts: &BoundConstants<T>,
    mode: CostMode<T>,
) -> CostAdjustedRegret<T> {
    let cost = consts.c * T::of_usize(consts.n) * T::of_usize(t);
    let value = match mode {
        CostMode::Additive => ExtReal::Finite(bound + cost),
        CostMode::Threshold { k } if bound > k => ExtReal::Infinite,
        CostMode::Threshold { .. } => ExtReal::Finite(cost),
    };
    CostAdjustedRegret { value, mode, bound, cost }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn consts(k: f64, l: f64, lambda: f64, m: f64, n: usize, p: f64) -> BoundConstants<f64> {
        BoundConstants::new(BoundParams {
            l_bound: l,
            lambda,
            m,
            d: 1,
            sigma: 1.0,
            delta: 0.1,
            k,
            c: 0.1,
            n,
            p_floor: p,
        })
        .unwrap()
    }

    #[test]
    fn tail_radius_examples() {
        let c = consts(1.0, 1.0, 1.0, 1.0, 4, 0.5);
        assert_eq!(tail_radius(4, 0.5, &c, false).unwrap(), 1.0);
        assert_eq!(tail_radius(4, 0.5, &c, true).unwrap(), 0.5);
        let r: Vec<f64> = (1..20).map(|t| tail_radius(t, 0.3, &c, true).unwrap()).collect();
        assert!(r.windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(tail_radius(1, 0.0, &c, true), Err(Error::Domain(_))));
    }

    #[test]
    fn radius_to_regret_examples() {
        let c = consts(1.0, 1.0, 1.0, 1.0, 1, 0.5);
        assert_eq!(regret_bound_from_radius(0.5, &c), 1.0);
        assert_eq!(regret_bound_from_radius(0.0, &c), 0.0);
    }

    #[test]
    fn regret_time_examples() {
        // lambda = 1, K' = 4, n = 1, p = 1 (outside the clip range, so use the
        // unclipped radius directly): K''/t = 2 at t = 2.
        let k = k_for_k_prime(4.0, 1.0, 1.0, 1.0);
        let c = consts(k, 1.0, 1.0, 1.0, 1, 0.5);
        assert!((c.k_prime - 4.0).abs() < 1e-12);
        let u = regret_bound_from_radius((c.k / (1.0 * 2.0 * 1.0)).sqrt(), &c);
        assert!((u - 2.0).abs() < 1e-12);
        // halving p quadruples the lambda = 1 bound
        let u1 = regret_bound_time_at(3, 0.4, &c).unwrap();
        let u2 = regret_bound_time_at(3, 0.2, &c).unwrap();
        assert!((u2 / u1 - 4.0).abs() < 1e-12);
        // K''/t form
        let u = regret_bound_time(5, &c).unwrap();
        assert!((u - c.k_double_prime() / 5.0).abs() < 1e-12);
    }

    #[test]
    fn composition_identities_hold_for_random_draws() {
        let mut rng = stream(31);
        for _ in 0..1000 {
            let c = BoundConstants::new(BoundParams {
                l_bound: rng.random_range(0.1..3.0),
                lambda: rng.random_range(0.2..3.0),
                m: rng.random_range(0.1..5.0),
                d: rng.random_range(1..6),
                sigma: 1.0,
                delta: rng.random_range(0.01..0.5),
                k: rng.random_range(0.01..10.0),
                c: 0.0,
                n: rng.random_range(1..500),
                p_floor: rng.random_range(0.01..0.5),
            })
            .unwrap();
            let t = rng.random_range(1..1000);
            let a: f64 = regret_bound_time(t, &c).unwrap();
            let b = regret_bound_from_radius(tail_radius(t, c.p_floor, &c, true).unwrap(), &c);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            // closed form K' (n t p^2)^(-(1+lambda)/2)
            let closed = c.k_prime * (c.n as f64 * t as f64 * c.p_floor * c.p_floor).powf(-(1.0 + c.lambda) / 2.0);
            assert!((a - closed).abs() <= 1e-10 * closed.abs().max(1e-300));
            let k: f64 = rng.random_range(0.0..2.0);
            let v = regret_bound_from_variance(k, &c).unwrap();
            let w = regret_bound_from_radius(chebyshev_radius(c.d, k, c.delta).unwrap(), &c);
            assert!((v - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn k_prime_consistency_is_validated() {
        let mut c = consts(1.0, 1.0, 1.0, 1.0, 1, 0.5);
        assert_eq!(c.k_prime, 4.0);
        c.k_prime = 4.1;
        assert!(c.validate().is_err());
        let back = k_for_k_prime(c.k_prime, 1.0, 1.0, 1.0);
        assert!((back - 1.025).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_t_and_n() {
        let a = consts(2.0, 1.0, 0.7, 1.0, 10, 0.2);
        let b = consts(2.0, 1.0, 0.7, 1.0, 11, 0.2);
        for t in 1..100 {
            let u = regret_bound_time(t, &a).unwrap();
            assert!(regret_bound_time(t + 1, &a).unwrap() < u);
            assert!(regret_bound_time(t, &b).unwrap() < u);
        }
    }

    #[test]
    fn chebyshev_examples() {
        assert_eq!(chebyshev_radius(1, 1.0, 0.25).unwrap(), 2.0);
        assert_eq!(chebyshev_radius(4, 1.0, 1.0).unwrap(), 2.0);
        assert!(matches!(chebyshev_radius(1, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn chebyshev_covers_gaussian_mean() {
        let r: f64 = chebyshev_radius(2, 1.0, 0.05).unwrap();
        assert!((r - 6.3246).abs() < 1e-4);
        let mut rng = stream(12);
        let draws = 10_000;
        let covered = (0..draws)
            .filter(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (a * a + b * b).sqrt() <= r
            })
            .count();
        assert!(covered as f64 / draws as f64 >= 0.95);
    }

    #[test]
    fn variance_bound_examples() {
        let mut c = consts(1.0, 1.0, 1.0, 1.0, 1, 0.5);
        assert_eq!(regret_bound_from_variance(0.0, &c).unwrap(), 0.0);
        c.delta = 1.0;
        assert_eq!(regret_bound_from_variance(1.0, &c).unwrap(), 4.0);
    }

    #[test]
    fn cost_adjusted_examples() {
        let mut c = consts(1.0, 1.0, 1.0, 1.0, 10, 0.5);
        c.c = 0.1;
        let a = cost_adjusted_regret(1.0, 5, &c, CostMode::Additive);
        assert!((a.value.finite().unwrap() - 6.0).abs() < 1e-12);
        let t = cost_adjusted_regret(2.0, 5, &c, CostMode::Threshold { k: 1.0 });
        assert!(t.value.is_infinite());
        let t = cost_adjusted_regret(0.5, 5, &c, CostMode::Threshold { k: 1.0 });
        assert!((t.value.finite().unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(serde_json::to_string(&ExtReal::<f64>::Infinite).unwrap(), "\"infinite\"");
    }
}
