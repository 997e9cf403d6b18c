//! Inference after a data-dependent stop.
//!
//! Samples of the stacked coefficient vector `(beta_0, beta_1)` are drawn from
//! the asymptotic law of the IVW estimator, restricted to trajectories that
//! stop at the realized time `T`. Intervals are per-coordinate nearest-rank
//! quantiles of those samples.
//!
//! Throughout, a sample is a flat vector of length `2d`: arm 0's coordinates
//! followed by arm 1's.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, stream, Stream};
use crate::scalar::Real;

pub const MIN_SAMPLES: usize = 100;

/// Attempts run in parallel in blocks of this size.
const ATTEMPT_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Unconditional Gaussian draws. Valid when the stopping statistic does
    /// not depend on the rewards, so the stop event is independent of the
    /// estimator's fluctuation.
    IndependenceShortcut,
    /// Resimulate whole trajectories under the plug-in model and keep the
    /// terminal estimates of those that stop at `T`.
    ResimulationRejection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    /// Each coordinate tested at level `1 - alpha / (2d)`.
    #[default]
    Bonferroni,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSamplerConfig<T> {
    pub mode: SamplerMode,
    pub n_samples: usize,
    pub max_attempts: usize,
    pub level: T,
    #[serde(default)]
    pub multiplicity: Multiplicity,
}

impl<T: Real> ConditionalSamplerConfig<T> {
    pub fn shortcut(n_samples: usize, level: T) -> Self {
        Self {
            mode: SamplerMode::IndependenceShortcut,
            n_samples,
            max_attempts: n_samples,
            level,
            multiplicity: Multiplicity::default(),
        }
    }

    pub fn rejection(n_samples: usize, max_attempts: usize, level: T) -> Self {
        Self {
            mode: SamplerMode::ResimulationRejection,
            n_samples,
            max_attempts,
            level,
            multiplicity: Multiplicity::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_samples >= MIN_SAMPLES, Config, "n_samples must be at least {MIN_SAMPLES}");
        ensure!(self.max_attempts >= self.n_samples, Config, "max_attempts must be at least n_samples");
        ensure!(self.level > T::zero() && self.level < T::one(), Config, "level must lie in (0, 1)");
        Ok(())
    }
}

/// Terminal state the samples are conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTarget<T> {
    pub stop_time: usize,
    /// Terminal IVW estimate per arm.
    pub beta: [Vec<T>; 2],
    /// Terminal covariance estimate per arm.
    pub sigma_hat: [Matrix<T>; 2],
}

impl<T: Real> ConditionalTarget<T> {
    pub fn dim(&self) -> usize {
        self.beta[0].len()
    }

    pub fn point(&self) -> Vec<T> {
        stack(&self.beta)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        ensure!(self.beta[1].len() == d, Contract, "arm estimates have different lengths");
        for s in &self.sigma_hat {
            ensure!(s.rows() == d && s.cols() == d, Contract, "covariance is not {d}x{d}");
        }
        Ok(())
    }
}

/// Outcome of one surrogate trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate<T> {
    pub stop_time: usize,
    /// Terminal IVW estimate per arm, if both arms had one.
    pub beta: Option<[Vec<T>; 2]>,
}

/// Runs surrogate trajectories for the rejection sampler. Implementations
/// must draw all randomness from the supplied stream.
pub trait Resimulator<T>: Sync {
    fn resimulate(&self, rng: &mut Stream) -> Result<Surrogate<T>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSamples<T> {
    pub samples: Vec<Vec<T>>,
    pub attempts: usize,
}

impl<T: Real> ConditionalSamples<T> {
    pub fn acceptance_rate(&self) -> T {
        T::of_usize(self.samples.len()) / T::of_usize(self.attempts.max(1))
    }
}

pub fn stack<T: Real>(pair: &[Vec<T>; 2]) -> Vec<T> {
    pair[0].iter().chain(&pair[1]).copied().collect()
}

pub fn unstack<T: Real>(flat: &[T]) -> Result<[Vec<T>; 2]> {
    ensure!(flat.len().is_multiple_of(2), Contract, "stacked vector has odd length {}", flat.len());
    let d = flat.len() / 2;
    Ok([flat[..d].to_vec(), flat[d..].to_vec()])
}

/// Draws conditional samples. Attempt `i` of the rejection sampler uses the
/// stream seeded by `derive_seed(seed, i)`, so the output does not depend on
/// how attempts are scheduled across threads.
pub fn sample_conditional<T: Real>(
    target: &ConditionalTarget<T>,
    cfg: &ConditionalSamplerConfig<T>,
    resim: Option<&dyn Resimulator<T>>,
    seed: u64,
) -> Result<ConditionalSamples<T>> {
    cfg.validate()?;
    target.validate()?;
    match cfg.mode {
        SamplerMode::IndependenceShortcut => sample_gaussian(target, cfg.n_samples, seed),
        SamplerMode::ResimulationRejection => {
            let resim = resim.ok_or_else(|| Error::Contract("rejection sampling needs a resimulator".into()))?;
            sample_rejection(target.stop_time, cfg, resim, seed)
        }
    }
}

fn sample_gaussian<T: Real>(target: &ConditionalTarget<T>, n: usize, seed: u64) -> Result<ConditionalSamples<T>> {
    let d = target.dim();
    let roots = [target.sigma_hat[0].psd_sqrt(), target.sigma_hat[1].psd_sqrt()];
    let mut rng = stream(seed);
    let mut z = vec![T::zero(); d];
    let samples = (0..n)
        .map(|_| {
            let mut out = Vec::with_capacity(2 * d);
            for a in 0..2 {
                for zi in z.iter_mut() {
                    *zi = T::lit(StandardNormal.sample(&mut rng));
                }
                let shift = roots[a].mul_vec(&z);
                out.extend(target.beta[a].iter().zip(&shift).map(|(b, s)| *b + *s));
            }
            out
        })
        .collect();
    Ok(ConditionalSamples { samples, attempts: n })
}

fn sample_rejection<T: Real>(
    stop_time: usize,
    cfg: &ConditionalSamplerConfig<T>,
    resim: &dyn Resimulator<T>,
    seed: u64,
) -> Result<ConditionalSamples<T>> {
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut attempts = 0;
    let mut start = 0;
    while start < cfg.max_attempts && samples.len() < cfg.n_samples {
        let end = (start + ATTEMPT_BLOCK).min(cfg.max_attempts);
        let block: Vec<Result<Surrogate<T>>> =
            (start..end).into_par_iter().map(|i| resim.resimulate(&mut stream(derive_seed(seed, i as u64)))).collect();
        for outcome in block {
            attempts += 1;
            let s = outcome?;
            if s.stop_time == stop_time {
                if let Some(beta) = s.beta {
                    samples.push(stack(&beta));
                    if samples.len() == cfg.n_samples {
                        break;
                    }
                }
            }
        }
        start = end;
    }
    if samples.is_empty() {
        return Err(Error::InfeasibleConditioning { attempts });
    }
    Ok(ConditionalSamples { samples, attempts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> Interval<T> {
    pub fn contains(&self, v: T) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// 1-based nearest rank `ceil(q N)`, clamped to `[1, N]`. The small slack
/// absorbs rounding in `q N` for exact products such as `0.95 * 100`.
pub(crate) fn nearest_rank<T: Real>(q: T, n: usize) -> usize {
    let x = q.as_f64() * n as f64;
    let r = (x - 1e-9 * x.abs().max(1.0)).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Per-coordinate nearest-rank interval at `level`.
pub fn bootstrap_interval<T: Real>(samples: &[Vec<T>], level: T) -> Result<Vec<Interval<T>>> {
    ensure!(samples.len() >= MIN_SAMPLES, Contract, "{} samples, need at least {MIN_SAMPLES}", samples.len());
    ensure!(level > T::zero() && level < T::one(), Contract, "level must lie in (0, 1)");
    let dim = samples[0].len();
    ensure!(samples.iter().all(|s| s.len() == dim), Contract, "samples have different lengths");
    let n = samples.len();
    let half = (T::one() - level) / T::lit(2.0);
    let (lo_rank, hi_rank) = (nearest_rank(half, n), nearest_rank(T::one() - half, n));
    let mut column = vec![T::zero(); n];
    Ok((0..dim)
        .map(|j| {
            for (c, s) in column.iter_mut().zip(samples) {
                *c = s[j];
            }
            column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            Interval { lo: column[lo_rank - 1], hi: column[hi_rank - 1] }
        })
        .collect())
}

/// Per-coordinate level implied by an overall `level` over `coords` coordinates.
pub fn coordinate_level<T: Real>(level: T, coords: usize, multiplicity: Multiplicity) -> T {
    match multiplicity {
        Multiplicity::Bonferroni => T::one() - (T::one() - level) / T::of_usize(coords.max(1)),
        Multiplicity::None => level,
    }
}

/// Rejects `H0: (beta_0, beta_1) = hypothesis` iff some coordinate lies
/// strictly outside its interval.
pub fn test_hypothesis<T: Real>(
    samples: &[Vec<T>],
    hypothesis: &[Vec<T>; 2],
    level: T,
    multiplicity: Multiplicity,
) -> Result<bool> {
    let h = stack(hypothesis);
    let dim = samples.first().map_or(0, Vec::len);
    ensure!(h.len() == dim, Contract, "hypothesis has {} coordinates, samples have {dim}", h.len());
    let intervals = bootstrap_interval(samples, coordinate_level(level, dim, multiplicity))?;
    Ok(intervals.iter().zip(&h).any(|(iv, v)| !iv.contains(*v)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult<T> {
    /// Terminal IVW estimate per arm.
    pub point: [Vec<T>; 2],
    /// Per-coordinate intervals at the configured level, per arm.
    pub intervals: [Vec<Interval<T>>; 2],
    /// `None` when no hypothesis was supplied.
    pub reject: Option<bool>,
    pub acceptance_rate: T,
    pub samples_retained: usize,
    pub attempts: usize,
}

/// Samples, forms intervals and optionally tests `hypothesis`.
pub fn run_inference<T: Real>(
    target: &ConditionalTarget<T>,
    cfg: &ConditionalSamplerConfig<T>,
    resim: Option<&dyn Resimulator<T>>,
    hypothesis: Option<&[Vec<T>; 2]>,
    seed: u64,
) -> Result<InferenceResult<T>> {
    let draws = sample_conditional(target, cfg, resim, seed)?;
    if draws.samples.len() < MIN_SAMPLES {
        return Err(Error::InfeasibleConditioning { attempts: draws.attempts });
    }
    let flat = bootstrap_interval(&draws.samples, cfg.level)?;
    let d = target.dim();
    let intervals = [flat[..d].to_vec(), flat[d..].to_vec()];
    let reject = hypothesis.map(|h| test_hypothesis(&draws.samples, h, cfg.level, cfg.multiplicity)).transpose()?;
    Ok(InferenceResult {
        point: target.beta.clone(),
        intervals,
        reject,
        acceptance_rate: draws.acceptance_rate(),
        samples_retained: draws.samples.len(),
        attempts: draws.attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn target(beta: [Vec<f64>; 2], var: f64) -> ConditionalTarget<f64> {
        let d = beta[0].len();
        ConditionalTarget {
            stop_time: 3,
            beta,
            sigma_hat: [Matrix::identity(d).scaled(var), Matrix::identity(d).scaled(var)],
        }
    }

    fn ints(n: usize) -> Vec<Vec<f64>> {
        (1..=n).map(|i| vec![i as f64]).collect()
    }

    #[test]
    fn nearest_rank_integers() {
        let iv = bootstrap_interval(&ints(100), 0.90).unwrap();
        assert_eq!((iv[0].lo, iv[0].hi), (5.0, 95.0));
        let iv = bootstrap_interval(&ints(100), 0.95).unwrap();
        assert_eq!((iv[0].lo, iv[0].hi), (3.0, 98.0));
    }

    #[test]
    fn constant_samples_degenerate_interval() {
        let s = vec![vec![2.5, -1.0]; 150];
        let iv = bootstrap_interval(&s, 0.95).unwrap();
        assert_eq!(iv[0], Interval { lo: 2.5, hi: 2.5 });
        assert_eq!(iv[1], Interval { lo: -1.0, hi: -1.0 });
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(bootstrap_interval(&ints(99), 0.9), Err(Error::Contract(_))));
    }

    #[test]
    fn normal_quantiles_converge() {
        let mut rng = stream(5);
        let s: Vec<Vec<f64>> = (0..100_000).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
        let iv = bootstrap_interval(&s, 0.95).unwrap();
        assert!((iv[0].lo + 1.96).abs() < 0.02, "{}", iv[0].lo);
        assert!((iv[0].hi - 1.96).abs() < 0.02, "{}", iv[0].hi);
    }

    #[test]
    fn intervals_nest() {
        let mut rng = stream(8);
        for _ in 0..50 {
            let n = rng.random_range(100..400);
            let s: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let wide = bootstrap_interval(&s, 0.99).unwrap();
            let narrow = bootstrap_interval(&s, 0.90).unwrap();
            for (w, v) in wide.iter().zip(&narrow) {
                assert!(w.lo <= v.lo && v.hi <= w.hi);
            }
        }
    }

    #[test]
    fn hypothesis_at_median_and_outside() {
        let mut rng = stream(9);
        let s: Vec<Vec<f64>> = (0..1001).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let median = |j: usize| {
            let mut c: Vec<f64> = s.iter().map(|v| v[j]).collect();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c[500]
        };
        let h = [vec![median(0)], vec![median(1)]];
        assert!(!test_hypothesis(&s, &h, 0.95, Multiplicity::None).unwrap());
        let max0 = s.iter().map(|v| v[0]).fold(f64::MIN, f64::max);
        let h = [vec![max0 + 1.0], vec![median(1)]];
        assert!(test_hypothesis(&s, &h, 0.95, Multiplicity::None).unwrap());
        assert!(matches!(test_hypothesis(&s, &[vec![0.0], vec![]], 0.95, Multiplicity::None), Err(Error::Contract(_))));
    }

    #[test]
    fn boundary_is_not_rejected() {
        let s = ints(100).into_iter().map(|v| vec![v[0], v[0]]).collect::<Vec<_>>();
        assert!(!test_hypothesis(&s, &[vec![5.0], vec![95.0]], 0.90, Multiplicity::None).unwrap());
        assert!(test_hypothesis(&s, &[vec![4.9], vec![50.0]], 0.90, Multiplicity::None).unwrap());
    }

    #[test]
    fn bonferroni_level() {
        assert!((coordinate_level(0.95f64, 4, Multiplicity::Bonferroni) - 0.9875).abs() < 1e-15);
        assert_eq!(coordinate_level(0.95, 4, Multiplicity::None), 0.95);
    }

    #[test]
    fn shortcut_mean_matches_point() {
        let t = target([vec![0.5, -1.0], vec![2.0, 0.0]], 0.3);
        let cfg = ConditionalSamplerConfig::shortcut(100_000, 0.95);
        let s = sample_conditional(&t, &cfg, None, 11).unwrap();
        let n = s.samples.len() as f64;
        let point = t.point();
        for j in 0..4 {
            let mean = s.samples.iter().map(|v| v[j]).sum::<f64>() / n;
            let se = (0.3f64 / n).sqrt();
            assert!((mean - point[j]).abs() < 3.0 * se, "coord {j}: {mean} vs {}", point[j]);
        }
        assert_eq!(s.acceptance_rate(), 1.0);
    }

    #[test]
    fn shortcut_is_deterministic() {
        let t = target([vec![0.5], vec![2.0]], 1.0);
        let cfg = ConditionalSamplerConfig::shortcut(200, 0.9);
        assert_eq!(sample_conditional(&t, &cfg, None, 3).unwrap(), sample_conditional(&t, &cfg, None, 3).unwrap());
    }

    /// Stop time uniform on {1..4}; estimate is the stop time in every coordinate.
    struct Dice;

    impl Resimulator<f64> for Dice {
        fn resimulate(&self, rng: &mut Stream) -> Result<Surrogate<f64>> {
            let t = rng.random_range(1..=4);
            Ok(Surrogate { stop_time: t, beta: Some([vec![t as f64], vec![-(t as f64)]]) })
        }
    }

    struct Never;

    impl Resimulator<f64> for Never {
        fn resimulate(&self, _: &mut Stream) -> Result<Surrogate<f64>> {
            Ok(Surrogate { stop_time: 99, beta: None })
        }
    }

    #[test]
    fn rejection_keeps_only_matching_stop_times() {
        let t = target([vec![0.0], vec![0.0]], 1.0);
        let cfg = ConditionalSamplerConfig::rejection(500, 10_000, 0.9);
        let s = sample_conditional(&t, &cfg, Some(&Dice), 4).unwrap();
        assert_eq!(s.samples.len(), 500);
        assert!(s.samples.iter().all(|v| v == &[3.0, -3.0]));
        // acceptance rate ~ 1/4
        let rate = s.acceptance_rate();
        let se = (0.25f64 * 0.75 / s.attempts as f64).sqrt();
        assert!((rate - 0.25).abs() < 4.0 * se, "rate {rate}");
        assert!(rate * cfg.max_attempts as f64 >= s.samples.len() as f64);
    }

    #[test]
    fn rejection_is_deterministic() {
        let t = target([vec![0.0], vec![0.0]], 1.0);
        let cfg = ConditionalSamplerConfig::rejection(300, 5_000, 0.9);
        let a = sample_conditional(&t, &cfg, Some(&Dice), 4).unwrap();
        let b = sample_conditional(&t, &cfg, Some(&Dice), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_conditioning_reports_attempts() {
        let t = target([vec![0.0], vec![0.0]], 1.0);
        let cfg = ConditionalSamplerConfig::rejection(100, 700, 0.9);
        match sample_conditional(&t, &cfg, Some(&Never), 1) {
            Err(Error::InfeasibleConditioning { attempts }) => assert_eq!(attempts, 700),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_invariants() {
        assert!(ConditionalSamplerConfig::shortcut(99, 0.9).validate().is_err());
        assert!(ConditionalSamplerConfig::rejection(200, 100, 0.9).validate().is_err());
        assert!(ConditionalSamplerConfig::shortcut(100, 1.0).validate().is_err());
    }

    #[test]
    fn run_inference_splits_arms() {
        let t = target([vec![1.0, 2.0], vec![3.0, 4.0]], 0.01);
        let r = run_inference(
            &t,
            &ConditionalSamplerConfig::shortcut(2000, 0.95),
            None,
            Some(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            2,
        )
        .unwrap();
        assert_eq!(r.intervals[0].len(), 2);
        assert!(r.intervals[1][1].contains(4.0));
        assert_eq!(r.reject, Some(false));
        assert_eq!(r.samples_retained, 2000);
    }
}
