//! Batched OLS, the inverse-variance weighted (IVW) combination of batch
//! estimates, and its variance estimators.
//!
//! Per batch `j` and arm `a` the unit of information is the pair
//! `(beta_hat_{j,a}, G_{j,a})` with `G_{j,a} = sum 1{A=a} x x^T`. The IVW
//! estimate is `(sum_j G_{j,a})^{-1} sum_j G_{j,a} beta_hat_{j,a}`.
//!
//! Batches whose arm Gram is numerically singular (see
//! [`crate::linalg::is_numerically_singular`]) carry no estimate for that arm
//! and are left out of that arm's IVW sums and residual variance entirely.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::{factor_gram, Matrix};
use crate::scalar::{dot, Real};
use crate::Arm;

/// One arm's share of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOls<T> {
    /// `None` iff `gram` is singular.
    pub beta_hat: Option<Vec<T>>,
    pub gram: Matrix<T>,
    /// `sum 1{A=a} x y`.
    pub moment: Vec<T>,
    pub count: usize,
    /// `sum 1{A=a} (y - x^T beta_hat)^2`, present with `beta_hat`.
    pub rss: Option<T>,
}

impl<T: Real> ArmOls<T> {
    fn empty(d: usize) -> Self {
        Self { beta_hat: None, gram: Matrix::zeros(d, d), moment: vec![T::zero(); d], count: 0, rss: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOlsFit<T> {
    /// 1-based batch index.
    pub batch: usize,
    /// Indexed by [`Arm::index`].
    pub arms: [ArmOls<T>; 2],
}

impl<T: Real> BatchOlsFit<T> {
    pub fn arm(&self, arm: Arm) -> &ArmOls<T> {
        &self.arms[arm.index()]
    }

    pub fn dim(&self) -> usize {
        self.arms[0].moment.len()
    }
}

/// Raw per-unit data of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchData<T> {
    pub contexts: Matrix<T>,
    pub actions: Vec<Arm>,
    pub rewards: Vec<T>,
}

fn check_aligned<T: Real>(contexts: &Matrix<T>, actions: &[Arm], rewards: &[T]) -> Result<()> {
    ensure!(
        contexts.rows() == actions.len() && actions.len() == rewards.len(),
        Contract,
        "misaligned batch: {} contexts, {} actions, {} rewards",
        contexts.rows(),
        actions.len(),
        rewards.len()
    );
    Ok(())
}

/// Per-arm OLS on one batch. Singular arms keep their Gram and moment but no
/// estimate.
pub fn fit_batch_ols<T: Real>(
    batch: usize,
    contexts: &Matrix<T>,
    actions: &[Arm],
    rewards: &[T],
) -> Result<BatchOlsFit<T>> {
    check_aligned(contexts, actions, rewards)?;
    let d = contexts.cols();
    let mut arms = [ArmOls::empty(d), ArmOls::empty(d)];
    for ((x, &a), &y) in contexts.iter_rows().zip(actions).zip(rewards) {
        let arm = &mut arms[a.index()];
        arm.gram.add_outer(x, T::one());
        for (m, &xi) in arm.moment.iter_mut().zip(x) {
            *m = *m + xi * y;
        }
        arm.count += 1;
    }
    for arm in arms.iter_mut() {
        if let Some(chol) = factor_gram(&arm.gram) {
            arm.beta_hat = Some(chol.solve(&arm.moment));
            arm.rss = Some(T::zero());
        }
    }
    for ((x, &a), &y) in contexts.iter_rows().zip(actions).zip(rewards) {
        let arm = &mut arms[a.index()];
        if let (Some(b), Some(rss)) = (&arm.beta_hat, arm.rss.as_mut()) {
            let r = y - dot(x, b);
            *rss = *rss + r * r;
        }
    }
    Ok(BatchOlsFit { batch, arms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode<T> {
    /// Noise sd known a priori (shared by both arms).
    KnownSigma { sigma: T },
    /// Per-arm residual variance around the IVW estimate.
    Residual,
}

/// Scale of the reported IVW covariance.
///
/// `PerUnit` is `(sum_j G_j)^{-1} s^2`, the sampling covariance of the IVW
/// estimate. `BatchScaled` multiplies it by the batch size `n`, i.e.
/// `n (sum_j G_j)^{-1} s^2`. Both only rescale thresholds on the variance
/// norm; intervals and standardized errors need `PerUnit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScaling {
    #[default]
    PerUnit,
    BatchScaled,
}

impl VarianceScaling {
    pub fn factor<T: Real>(self, n: usize) -> T {
        match self {
            VarianceScaling::PerUnit => T::one(),
            VarianceScaling::BatchScaled => T::of_usize(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmIvw<T> {
    pub beta: Vec<T>,
    pub sigma_hat: Matrix<T>,
    pub total_gram: Matrix<T>,
    pub batches_used: usize,
    /// Units in the batches used.
    pub count: usize,
    /// Noise variance plugged into `sigma_hat` (`sigma^2` or the residual mean square).
    pub noise_variance: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvwEstimate<T> {
    pub arms: [ArmIvw<T>; 2],
    pub batch_size: usize,
    pub sigma_mode: SigmaMode<T>,
    pub scaling: VarianceScaling,
}

impl<T: Real> IvwEstimate<T> {
    pub fn arm(&self, arm: Arm) -> &ArmIvw<T> {
        &self.arms[arm.index()]
    }
}

/// Running sums for one arm. Pushing fits in order and reading the estimate
/// after each push gives the online IVW path without storing the fits.
#[derive(Debug, Clone, PartialEq)]
struct ArmSums<T> {
    total_gram: Matrix<T>,
    weighted: Vec<T>,
    /// `sum_j beta_j^T G_j beta_j`, for the streaming residual.
    quad: T,
    rss: T,
    batches: usize,
    count: usize,
    /// The only estimate while a single batch has contributed.
    sole: Option<Vec<T>>,
}

impl<T: Real> ArmSums<T> {
    fn new(d: usize) -> Self {
        Self {
            total_gram: Matrix::zeros(d, d),
            weighted: vec![T::zero(); d],
            quad: T::zero(),
            rss: T::zero(),
            batches: 0,
            count: 0,
            sole: None,
        }
    }

    fn push(&mut self, fit: &ArmOls<T>) {
        let (Some(beta), Some(rss)) = (&fit.beta_hat, fit.rss) else {
            return;
        };
        let gb = fit.gram.mul_vec(beta);
        self.total_gram.add_assign(&fit.gram);
        for (w, g) in self.weighted.iter_mut().zip(&gb) {
            *w = *w + *g;
        }
        self.quad = self.quad + dot(beta, &gb);
        self.rss = self.rss + rss;
        self.batches += 1;
        self.count += fit.count;
        self.sole = (self.batches == 1).then(|| beta.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvwAccumulator<T> {
    dim: usize,
    arms: [ArmSums<T>; 2],
}

impl<T: Real> IvwAccumulator<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, arms: [ArmSums::new(dim), ArmSums::new(dim)] }
    }

    pub fn push(&mut self, fit: &BatchOlsFit<T>) -> Result<()> {
        ensure!(fit.dim() == self.dim, Contract, "fit dimension {} != {}", fit.dim(), self.dim);
        for arm in Arm::BOTH {
            self.arms[arm.index()].push(fit.arm(arm));
        }
        Ok(())
    }

    pub fn batches_used(&self, arm: Arm) -> usize {
        self.arms[arm.index()].batches
    }

    /// Current IVW estimate with variance per `mode`. The residual variance
    /// here uses the streaming identity
    /// `sum_j [rss_j + (b_j - b)^T G_j (b_j - b)]`, expanded.
    pub fn estimate(&self, mode: SigmaMode<T>, scaling: VarianceScaling, n: usize) -> Result<IvwEstimate<T>> {
        let arm0 = self.arm_estimate(Arm::Arm0, mode, scaling, n)?;
        let arm1 = self.arm_estimate(Arm::Arm1, mode, scaling, n)?;
        Ok(IvwEstimate { arms: [arm0, arm1], batch_size: n, sigma_mode: mode, scaling })
    }

    fn arm_estimate(&self, arm: Arm, mode: SigmaMode<T>, scaling: VarianceScaling, n: usize) -> Result<ArmIvw<T>> {
        let sums = &self.arms[arm.index()];
        let unavailable = |reason: String| Error::EstimatorUnavailable { arm, reason };
        if sums.batches == 0 {
            return Err(unavailable("no batch with a nonsingular Gram".into()));
        }
        let chol = factor_gram(&sums.total_gram).ok_or_else(|| unavailable("total Gram is singular".into()))?;
        let beta = match &sums.sole {
            Some(b) => b.clone(),
            None => chol.solve(&sums.weighted),
        };
        let noise_variance = match mode {
            SigmaMode::KnownSigma { sigma } => sigma * sigma,
            SigmaMode::Residual => {
                if sums.count < self.dim + 1 {
                    return Err(unavailable(format!("{} units, need at least {}", sums.count, self.dim + 1)));
                }
                let cross = dot(&beta, &sums.weighted);
                let quad_b = sums.total_gram.quad_form(&beta);
                let ss = (sums.rss + sums.quad - cross - cross + quad_b).max(T::zero());
                ss / T::of_usize(sums.count)
            }
        };
        let sigma_hat = chol.inverse().scaled(scaling.factor::<T>(n) * noise_variance);
        Ok(ArmIvw {
            beta,
            sigma_hat,
            total_gram: sums.total_gram.clone(),
            batches_used: sums.batches,
            count: sums.count,
            noise_variance,
        })
    }
}

/// IVW combination of a list of batch fits.
pub fn ivw_combine<T: Real>(
    fits: &[BatchOlsFit<T>],
    mode: SigmaMode<T>,
    scaling: VarianceScaling,
    n: usize,
) -> Result<IvwEstimate<T>> {
    let dim = fits
        .first()
        .map(BatchOlsFit::dim)
        .ok_or_else(|| Error::EstimatorUnavailable { arm: Arm::Arm1, reason: "no batches".into() })?;
    let mut acc = IvwAccumulator::new(dim);
    for f in fits {
        acc.push(f)?;
    }
    acc.estimate(mode, scaling, n)
}

fn total_gram_factor<T: Real>(fits: &[BatchOlsFit<T>], arm: Arm) -> Result<crate::linalg::Cholesky<T>> {
    let d = fits.first().map_or(0, BatchOlsFit::dim);
    let mut g = Matrix::zeros(d, d);
    for f in fits {
        let a = f.arm(arm);
        if a.beta_hat.is_some() {
            g.add_assign(&a.gram);
        }
    }
    factor_gram(&g).ok_or_else(|| Error::EstimatorUnavailable { arm, reason: "total Gram is singular".into() })
}

/// `scale * (sum_j G_{j,a})^{-1} sigma^2` per arm, indexed by [`Arm::index`].
pub fn variance_known_sigma<T: Real>(
    fits: &[BatchOlsFit<T>],
    sigma: T,
    n: usize,
    scaling: VarianceScaling,
) -> Result<[Matrix<T>; 2]> {
    let f = scaling.factor::<T>(n) * sigma * sigma;
    let v0 = total_gram_factor(fits, Arm::Arm0)?.inverse().scaled(f);
    let v1 = total_gram_factor(fits, Arm::Arm1)?.inverse().scaled(f);
    Ok([v0, v1])
}

/// Residual-based covariance per arm; residuals of arm `a` are taken against
/// the arm-`a` IVW estimate. Computed batch by batch from the fits as
/// `sum_j [rss_j + (b_j - b)^T G_j (b_j - b)] / sum_j count_j`.
pub fn variance_residual<T: Real>(
    fits: &[BatchOlsFit<T>],
    ivw: &IvwEstimate<T>,
    n: usize,
    scaling: VarianceScaling,
) -> Result<[ResidualVariance<T>; 2]> {
    let d = fits.first().map_or(0, BatchOlsFit::dim);
    let per_arm = |arm: Arm| -> Result<ResidualVariance<T>> {
        let b = &ivw.arm(arm).beta;
        let (mut ss, mut count) = (T::zero(), 0usize);
        for f in fits {
            let a = f.arm(arm);
            if let (Some(bj), Some(rss)) = (&a.beta_hat, a.rss) {
                let diff: Vec<T> = bj.iter().zip(b).map(|(&u, &v)| u - v).collect();
                ss = ss + rss + a.gram.quad_form(&diff);
                count += a.count;
            }
        }
        residual_from_sums(fits, arm, ss, count, d, n, scaling)
    };
    Ok([per_arm(Arm::Arm0)?, per_arm(Arm::Arm1)?])
}

/// Same quantity as [`variance_residual`], computed from retained per-unit
/// data by direct residual summation.
pub fn variance_residual_from_data<T: Real>(
    fits: &[BatchOlsFit<T>],
    data: &[BatchData<T>],
    ivw: &IvwEstimate<T>,
    n: usize,
    scaling: VarianceScaling,
) -> Result<[ResidualVariance<T>; 2]> {
    ensure!(fits.len() == data.len(), Contract, "{} fits for {} batches of data", fits.len(), data.len());
    let d = fits.first().map_or(0, BatchOlsFit::dim);
    let per_arm = |arm: Arm| -> Result<ResidualVariance<T>> {
        let b = &ivw.arm(arm).beta;
        let (mut ss, mut count) = (T::zero(), 0usize);
        for (f, batch) in fits.iter().zip(data) {
            check_aligned(&batch.contexts, &batch.actions, &batch.rewards)?;
            if f.arm(arm).beta_hat.is_none() {
                continue;
            }
            for ((x, &a), &y) in batch.contexts.iter_rows().zip(&batch.actions).zip(&batch.rewards) {
                if a == arm {
                    let r = y - dot(x, b);
                    ss = ss + r * r;
                    count += 1;
                }
            }
        }
        residual_from_sums(fits, arm, ss, count, d, n, scaling)
    };
    Ok([per_arm(Arm::Arm0)?, per_arm(Arm::Arm1)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualVariance<T> {
    /// Mean squared residual.
    pub factor: T,
    pub sigma_hat: Matrix<T>,
}

fn residual_from_sums<T: Real>(
    fits: &[BatchOlsFit<T>],
    arm: Arm,
    ss: T,
    count: usize,
    d: usize,
    n: usize,
    scaling: VarianceScaling,
) -> Result<ResidualVariance<T>> {
    if count < d + 1 {
        return Err(Error::EstimatorUnavailable { arm, reason: format!("{count} units, need at least {}", d + 1) });
    }
    let factor = ss / T::of_usize(count);
    let sigma_hat = total_gram_factor(fits, arm)?.inverse().scaled(scaling.factor::<T>(n) * factor);
    Ok(ResidualVariance { factor, sigma_hat })
}

/// Per-batch sufficient statistic: `(beta_hat_1, G_1, beta_hat_0, G_0)` plus
/// the per-arm moment vectors, counts and residual sums needed to replay
/// policies and residual variances exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientEntry<T> {
    pub batch: usize,
    pub arm1: ArmOls<T>,
    pub arm0: ArmOls<T>,
}

impl<T: Real> SufficientEntry<T> {
    pub fn to_fit(&self) -> BatchOlsFit<T> {
        BatchOlsFit { batch: self.batch, arms: [self.arm0.clone(), self.arm1.clone()] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SufficientStats<T> {
    pub entries: Vec<SufficientEntry<T>>,
}

impl<T: Real> SufficientStats<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, fit: &BatchOlsFit<T>) {
        self.entries.push(SufficientEntry {
            batch: fit.batch,
            arm1: fit.arm(Arm::Arm1).clone(),
            arm0: fit.arm(Arm::Arm0).clone(),
        });
    }

    pub fn fits(&self) -> Vec<BatchOlsFit<T>> {
        self.entries.iter().map(SufficientEntry::to_fit).collect()
    }
}

pub fn sufficient_statistics<T: Real>(fits: &[BatchOlsFit<T>]) -> SufficientStats<T> {
    let mut s = SufficientStats::default();
    for f in fits {
        s.push(f);
    }
    s
}
