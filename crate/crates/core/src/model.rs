//! Simulated environment: bounded context distributions, the two-arm linear
//! reward model, and Monte Carlo checks of the regularity assumptions
//! (bounded contexts, well-conditioned second moment, margin condition).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Real};
use crate::Arm;

const MAX_TRUNCATION_ATTEMPTS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextDist<T> {
    /// Independent coordinates, `x_i ~ Uniform[lower_i, upper_i]`. A
    /// coordinate with `lower_i == upper_i` is a constant (an intercept).
    UniformBox { lower: Vec<T>, upper: Vec<T> },
    /// `N(mean, cov)` conditioned on `max_i |x_i| <= box_bound`.
    TruncatedGaussian { mean: Vec<T>, cov: Matrix<T>, box_bound: T },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec<T> {
    pub dim: usize,
    pub dist: ContextDist<T>,
    /// Sup-norm bound `L` on every context.
    pub bound: T,
}

impl<T: Real> ContextSpec<T> {
    /// i.i.d. `Uniform[-bound, bound]^dim`.
    pub fn uniform_cube(dim: usize, bound: T) -> Self {
        Self { dim, dist: ContextDist::UniformBox { lower: vec![-bound; dim], upper: vec![bound; dim] }, bound }
    }

    /// Constant 1 in the first coordinate, `Uniform[-1, 1]` elsewhere.
    pub fn intercept_uniform(dim: usize) -> Self {
        let mut lower = vec![-T::one(); dim];
        if dim > 0 {
            lower[0] = T::one();
        }
        Self { dim, dist: ContextDist::UniformBox { lower, upper: vec![T::one(); dim] }, bound: T::one() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim >= 1, Config, "context dimension must be at least 1");
        ensure!(self.bound > T::zero() && self.bound.is_finite(), Config, "context bound must be positive");
        match &self.dist {
            ContextDist::UniformBox { lower, upper } => {
                ensure!(
                    lower.len() == self.dim && upper.len() == self.dim,
                    Config,
                    "uniform box bounds must have length {}",
                    self.dim
                );
                for (i, (&lo, &hi)) in lower.iter().zip(upper).enumerate() {
                    ensure!(lo <= hi, Config, "uniform box coordinate {i} is inverted ({lo} > {hi})");
                    ensure!(
                        lo.abs() <= self.bound && hi.abs() <= self.bound,
                        Config,
                        "uniform box coordinate {i} exceeds the context bound {}",
                        self.bound
                    );
                }
            }
            ContextDist::TruncatedGaussian { mean, cov, box_bound } => {
                ensure!(mean.len() == self.dim, Config, "gaussian mean must have length {}", self.dim);
                ensure!(
                    cov.rows() == self.dim && cov.cols() == self.dim,
                    Config,
                    "gaussian covariance must be {0}x{0}",
                    self.dim
                );
                ensure!(cov.is_symmetric(T::lit(1e-9)), Config, "gaussian covariance is not symmetric");
                ensure!(cov.cholesky().is_some(), Config, "gaussian covariance is not positive definite");
                ensure!(
                    *box_bound > T::zero() && *box_bound <= self.bound,
                    Config,
                    "truncation box must lie in (0, {}]",
                    self.bound
                );
            }
        }
        Ok(())
    }

    fn draw_into<R: Rng + ?Sized>(&self, chol: Option<&Matrix<T>>, rng: &mut R, out: &mut [T]) -> Result<()> {
        match &self.dist {
            ContextDist::UniformBox { lower, upper } => {
                for ((o, &lo), &hi) in out.iter_mut().zip(lower).zip(upper) {
                    let u: f64 = rng.random();
                    *o = lo + (hi - lo) * T::lit(u);
                }
                Ok(())
            }
            ContextDist::TruncatedGaussian { mean, box_bound, .. } => {
                let l = chol.expect("cholesky factor precomputed");
                let d = self.dim;
                let mut z = vec![T::zero(); d];
                for _ in 0..MAX_TRUNCATION_ATTEMPTS {
                    for zi in z.iter_mut() {
                        *zi = T::lit(rng.sample::<f64, _>(StandardNormal));
                    }
                    for i in 0..d {
                        let mut s = mean[i];
                        for k in 0..=i {
                            s = s + l[(i, k)] * z[k];
                        }
                        out[i] = s;
                    }
                    if out.iter().all(|v| v.abs() <= *box_bound) {
                        return Ok(());
                    }
                }
                Err(Error::Config(format!(
                    "truncation box retains negligible gaussian mass ({MAX_TRUNCATION_ATTEMPTS} rejections)"
                )))
            }
        }
    }
}

/// Draws `n` i.i.d. contexts as the rows of an `n x d` matrix.
pub fn sample_batch_contexts<T: Real, R: Rng + ?Sized>(
    spec: &ContextSpec<T>,
    n: usize,
    rng: &mut R,
) -> Result<Matrix<T>> {
    spec.validate()?;
    ensure!(n >= 1, Contract, "batch size must be at least 1");
    let chol = match &spec.dist {
        ContextDist::TruncatedGaussian { cov, .. } => Some(cov.cholesky().expect("validated").factor().clone()),
        ContextDist::UniformBox { .. } => None,
    };
    let mut m = Matrix::zeros(n, spec.dim);
    for i in 0..n {
        spec.draw_into(chol.as_ref(), rng, m.row_mut(i))?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// `Uniform[-sqrt(3) sigma, sqrt(3) sigma]`: bounded, sd `sigma`.
    BoundedUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel<T> {
    pub beta0: Vec<T>,
    pub beta1: Vec<T>,
    pub sigma0: T,
    pub sigma1: T,
    #[serde(default)]
    pub noise: NoiseKind,
}

impl<T: Real> TrueModel<T> {
    pub fn homoskedastic(beta0: Vec<T>, beta1: Vec<T>, sigma: T) -> Self {
        Self { beta0, beta1, sigma0: sigma, sigma1: sigma, noise: NoiseKind::Gaussian }
    }

    pub fn beta(&self, arm: Arm) -> &[T] {
        match arm {
            Arm::Arm0 => &self.beta0,
            Arm::Arm1 => &self.beta1,
        }
    }

    pub fn sigma(&self, arm: Arm) -> T {
        match arm {
            Arm::Arm0 => self.sigma0,
            Arm::Arm1 => self.sigma1,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta0.len()
    }

    pub fn mean_reward(&self, x: &[T], arm: Arm) -> T {
        dot(x, self.beta(arm))
    }

    /// `beta1 - beta0`.
    pub fn effect(&self) -> Vec<T> {
        self.beta1.iter().zip(&self.beta0).map(|(&a, &b)| a - b).collect()
    }

    /// True optimal policy: arm 1 iff `(beta1 - beta0)^T x > 0`.
    pub fn optimal_arm(&self, x: &[T]) -> Arm {
        Arm::from_indicator(dot(&self.effect(), x) > T::zero())
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        ensure!(
            self.beta0.len() == dim && self.beta1.len() == dim,
            Config,
            "beta vectors must have length {dim} (got {} and {})",
            self.beta0.len(),
            self.beta1.len()
        );
        ensure!(self.sigma0 >= T::zero() && self.sigma1 >= T::zero(), Config, "noise scales must be non-negative");
        ensure!(self.beta0.iter().chain(&self.beta1).all(|v| v.is_finite()), Config, "beta entries must be finite");
        Ok(())
    }

    fn draw_noise<R: Rng + ?Sized>(&self, arm: Arm, rng: &mut R) -> T {
        let s = self.sigma(arm);
        if s == T::zero() {
            return T::zero();
        }
        match self.noise {
            NoiseKind::Gaussian => s * T::lit(rng.sample::<f64, _>(StandardNormal)),
            NoiseKind::BoundedUniform => {
                let u: f64 = rng.random();
                s * T::lit(3f64.sqrt() * (2.0 * u - 1.0))
            }
        }
    }
}

/// `y_i = x_i^T beta_{a_i} + e_i` with `e_i` independent of `x_i` given `a_i`.
pub fn realize_rewards<T: Real, R: Rng + ?Sized>(
    model: &TrueModel<T>,
    contexts: &Matrix<T>,
    actions: &[Arm],
    rng: &mut R,
) -> Result<Vec<T>> {
    ensure!(
        contexts.cols() == model.dim(),
        Contract,
        "contexts have {} columns, model has dimension {}",
        contexts.cols(),
        model.dim()
    );
    ensure!(actions.len() == contexts.rows(), Contract, "{} actions for {} contexts", actions.len(), contexts.rows());
    Ok(contexts.iter_rows().zip(actions).map(|(x, &a)| model.mean_reward(x, a) + model.draw_noise(a, rng)).collect())
}

/// Log-log least-squares fit of `P(|(beta1 - beta0)^T x| <= h) ~ M h^lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginFit<T> {
    pub m_hat: T,
    pub lambda_hat: T,
    /// `(h, P_hat(h))` for the grid points used in the fit.
    pub points: Vec<(T, T)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssumptionFlags {
    pub bounded: bool,
    pub min_eigenvalue: bool,
    pub margin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport<T> {
    /// Largest observed sup-norm.
    pub l_hat: T,
    /// Smallest eigenvalue of the empirical second-moment matrix.
    pub lambda_min_hat: T,
    /// `None` when the arms coincide or fewer than two grid points have mass.
    pub margin_fit: Option<MarginFit<T>>,
    pub mc_samples: usize,
    pub satisfied: AssumptionFlags,
}

/// `{0.01 * 2^j : j = 0..=6}`.
pub fn default_h_grid<T: Real>() -> Vec<T> {
    (0..=6).map(|j| T::lit(0.01 * f64::powi(2.0, j))).collect()
}

pub fn check_assumptions<T: Real, R: Rng + ?Sized>(
    spec: &ContextSpec<T>,
    model: &TrueModel<T>,
    mc_samples: usize,
    h_grid: &[T],
    rng: &mut R,
) -> Result<AssumptionReport<T>> {
    spec.validate()?;
    model.validate(spec.dim)?;
    ensure!(mc_samples >= 1000, Config, "check_assumptions needs at least 1000 samples");
    ensure!(!h_grid.is_empty(), Config, "margin grid is empty");
    ensure!(
        h_grid.iter().all(|&h| h > T::zero()) && h_grid.windows(2).all(|w| w[0] < w[1]),
        Config,
        "margin grid must be positive and strictly ascending"
    );

    let xs = sample_batch_contexts(spec, mc_samples, rng)?;
    let d = spec.dim;
    let effect = model.effect();
    let mut second = Matrix::zeros(d, d);
    let mut l_hat = T::zero();
    let mut margins = Vec::with_capacity(mc_samples);
    for x in xs.iter_rows() {
        l_hat = x.iter().fold(l_hat, |m, v| m.max(v.abs()));
        second.add_outer(x, T::one());
        margins.push(dot(&effect, x).abs());
    }
    let second = second.scaled(T::one() / T::of_usize(mc_samples));
    let lambda_min_hat = second.sym_eigen().min();

    let arms_differ = effect.iter().any(|&v| v != T::zero());
    let margin_fit = if arms_differ {
        margins.sort_by(|a, b| a.partial_cmp(b).expect("finite margins"));
        let points: Vec<(T, T)> = h_grid
            .iter()
            .map(|&h| {
                let below = margins.partition_point(|&m| m <= h);
                (h, T::of_usize(below) / T::of_usize(mc_samples))
            })
            .filter(|&(_, p)| p > T::zero())
            .collect();
        fit_power_law(&points).map(|(m_hat, lambda_hat)| MarginFit { m_hat, lambda_hat, points })
    } else {
        None
    };

    let satisfied = AssumptionFlags {
        bounded: l_hat <= spec.bound,
        min_eigenvalue: lambda_min_hat > T::zero(),
        margin: margin_fit.as_ref().is_some_and(|f| f.lambda_hat > T::zero() && f.m_hat.is_finite()),
    };
    Ok(AssumptionReport { l_hat, lambda_min_hat, margin_fit, mc_samples, satisfied })
}

/// Least squares `log p = log M + lambda log h`; needs two distinct abscissae.
fn fit_power_law<T: Real>(points: &[(T, T)]) -> Option<(T, T)> {
    if points.len() < 2 {
        return None;
    }
    let k = T::of_usize(points.len());
    let (sx, sy) = points.iter().fold((T::zero(), T::zero()), |(sx, sy), &(h, p)| (sx + h.ln(), sy + p.ln()));
    let (mx, my) = (sx / k, sy / k);
    let (sxx, sxy) = points.iter().fold((T::zero(), T::zero()), |(sxx, sxy), &(h, p)| {
        let dx = h.ln() - mx;
        (sxx + dx * dx, sxy + dx * (p.ln() - my))
    });
    if sxx == T::zero() {
        return None;
    }
    let lambda = sxy / sxx;
    Some(((my - lambda * mx).exp(), lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    type ContextSpec = super::ContextSpec<f64>;
    type TrueModel = super::TrueModel<f64>;
    use crate::rng::stream;

    #[test]
    fn point_mass_box() {
        let spec =
            ContextSpec { dim: 1, dist: ContextDist::UniformBox { lower: vec![1.0], upper: vec![1.0] }, bound: 1.0 };
        let m = sample_batch_contexts(&spec, 3, &mut stream(1)).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_cube_mean() {
        // Each coordinate has sd 1/sqrt(3); 3 standard errors at n=1e4 is 0.0173 < 0.05.
        let spec = ContextSpec::uniform_cube(2, 1.0);
        let n = 10_000;
        let m = sample_batch_contexts(&spec, n, &mut stream(2)).unwrap();
        for j in 0..2 {
            let mean: f64 = m.iter_rows().map(|r| r[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.05, "coordinate {j} mean {mean}");
        }
    }

    #[test]
    fn truncated_gaussian_within_box() {
        let spec = ContextSpec {
            dim: 2,
            dist: ContextDist::TruncatedGaussian {
                mean: vec![0.2, -0.1],
                cov: Matrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.5]]).unwrap(),
                box_bound: 1.0,
            },
            bound: 1.0,
        };
        let m = sample_batch_contexts(&spec, 5000, &mut stream(3)).unwrap();
        assert!(m.as_slice().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let inverted =
            ContextSpec { dim: 1, dist: ContextDist::UniformBox { lower: vec![1.0], upper: vec![0.0] }, bound: 1.0 };
        assert!(matches!(sample_batch_contexts(&inverted, 1, &mut stream(0)), Err(Error::Config(_))));
        let not_pd = ContextSpec {
            dim: 2,
            dist: ContextDist::TruncatedGaussian {
                mean: vec![0.0, 0.0],
                cov: Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap(),
                box_bound: 1.0,
            },
            bound: 1.0,
        };
        assert!(matches!(not_pd.validate(), Err(Error::Config(_))));
        let too_wide = ContextSpec::uniform_cube(2, 2.0);
        let mut s = too_wide.clone();
        s.bound = 1.0;
        assert!(s.validate().is_err());
        assert!(ContextSpec::uniform_cube(0, 1.0).validate().is_err());
    }

    #[test]
    fn zero_noise_reward() {
        let model = TrueModel::homoskedastic(vec![0.0, 0.0], vec![1.0, 1.0], 0.0);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = realize_rewards(&model, &x, &[Arm::Arm1], &mut stream(0)).unwrap();
        assert_eq!(y, vec![3.0]);
    }

    #[test]
    fn reward_dimension_mismatch() {
        let model = TrueModel::homoskedastic(vec![0.0], vec![1.0], 1.0);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(realize_rewards(&model, &x, &[Arm::Arm1], &mut stream(0)), Err(Error::Contract(_))));
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(realize_rewards(&model, &x, &[], &mut stream(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn null_model_reward_mean_and_noise_sd() {
        let n = 10_000;
        let model = TrueModel::homoskedastic(vec![0.0], vec![0.0], 1.0);
        let x = Matrix::from_vec(n, 1, vec![0.7; n]).unwrap();
        let actions: Vec<Arm> = (0..n).map(|i| Arm::from_indicator(i % 3 == 0)).collect();
        let y = realize_rewards(&model, &x, &actions, &mut stream(5)).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / 100.0, "mean {mean}");
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        // chi-square bounds on sd at n=1e4: roughly 1 +- 3/sqrt(2n) = [0.979, 1.021]
        assert!((0.97..=1.03).contains(&sd), "sd {sd}");
    }

    #[test]
    fn bounded_uniform_noise_has_unit_sd_and_bound() {
        let n = 10_000;
        let mut model = TrueModel::homoskedastic(vec![0.0], vec![0.0], 1.0);
        model.noise = NoiseKind::BoundedUniform;
        let x = Matrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let y = realize_rewards(&model, &x, &vec![Arm::Arm0; n], &mut stream(6)).unwrap();
        assert!(y.iter().all(|v| v.abs() <= 3f64.sqrt()));
        let sd = (y.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!((0.97..=1.03).contains(&sd), "sd {sd}");
    }

    #[test]
    fn assumptions_uniform_cube() {
        let spec = ContextSpec::uniform_cube(2, 1.0);
        let model = TrueModel::homoskedastic(vec![0.0, 0.0], vec![1.0, 0.0], 1.0);
        let rep = check_assumptions(&spec, &model, 100_000, &default_h_grid(), &mut stream(9)).unwrap();
        assert!(rep.l_hat <= 1.0);
        assert!((rep.lambda_min_hat - 1.0 / 3.0).abs() < 0.05 / 3.0, "{}", rep.lambda_min_hat);
        let fit = rep.margin_fit.unwrap();
        // P(|x1| <= h) = h exactly on the grid
        assert!((fit.lambda_hat - 1.0).abs() < 0.1, "lambda {}", fit.lambda_hat);
        assert!((fit.m_hat - 1.0).abs() < 0.1, "M {}", fit.m_hat);
        assert!(rep.satisfied.bounded && rep.satisfied.min_eigenvalue && rep.satisfied.margin);
    }

    #[test]
    fn identical_arms_margin_unsatisfied() {
        let spec = ContextSpec::uniform_cube(2, 1.0);
        let model = TrueModel::homoskedastic(vec![0.5, 0.5], vec![0.5, 0.5], 1.0);
        let rep = check_assumptions(&spec, &model, 1000, &default_h_grid(), &mut stream(1)).unwrap();
        assert!(rep.margin_fit.is_none());
        assert!(!rep.satisfied.margin);
    }

    #[test]
    fn bad_grid_rejected() {
        let spec = ContextSpec::uniform_cube(1, 1.0);
        let model = TrueModel::homoskedastic(vec![0.0], vec![1.0], 1.0);
        assert!(check_assumptions(&spec, &model, 1000, &[0.2, 0.1], &mut stream(1)).is_err());
        assert!(check_assumptions(&spec, &model, 10, &[0.1], &mut stream(1)).is_err());
    }
}
