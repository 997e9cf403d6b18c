//! Monte Carlo diagnostics for the asymptotic normality of the IVW estimator.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::estimators::SufficientStats;
use crate::linalg::Matrix;
use crate::model::{sample_batch_contexts, ContextSpec, TrueModel};
use crate::policies::{clip, ClipSchedule, PolicyKind};
use crate::scalar::dot;
use crate::stopping::spectral_norm;
use crate::Arm;

const CHUNK: usize = 8192;

/// Limiting clipped probability of arm 1 at `x` once the policy's
/// estimates have converged to the truth.
pub fn limiting_probability(
    policy: &PolicyKind<f64>,
    clip_schedule: &ClipSchedule<f64>,
    model: &TrueModel<f64>,
    x: &[f64],
) -> Result<f64> {
    let gap = dot(&model.effect(), x);
    let greedy = |hi: f64, lo: f64| {
        if gap > 0.0 {
            hi
        } else if gap < 0.0 {
            lo
        } else {
            0.5
        }
    };
    let pre = match policy {
        PolicyKind::UniformRandom => 0.5,
        PolicyKind::EpsGreedy { eps } => {
            let e = eps.limit();
            greedy(1.0 - e / 2.0, e / 2.0)
        }
        PolicyKind::Ucb { .. } | PolicyKind::Thompson { .. } => greedy(1.0, 0.0),
    };
    clip(pre, clip_schedule.floor())
}

/// `Sigma_a^* = E[pi_a(x) x x^T]` under the limiting assignment probability,
/// indexed by arm.
pub fn sigma_star<R: Rng + ?Sized>(
    context: &ContextSpec<f64>,
    model: &TrueModel<f64>,
    policy: &PolicyKind<f64>,
    clip_schedule: &ClipSchedule<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<[Matrix<f64>; 2]> {
    ensure!(samples >= 1, Config, "sigma_star needs at least one sample");
    let d = context.dim;
    let mut out = [Matrix::zeros(d, d), Matrix::zeros(d, d)];
    let mut left = samples;
    while left > 0 {
        let m = left.min(CHUNK);
        for x in sample_batch_contexts(context, m, rng)?.iter_rows() {
            let p = limiting_probability(policy, clip_schedule, model, x)?;
            out[1].add_outer(x, p);
            out[0].add_outer(x, 1.0 - p);
        }
        left -= m;
    }
    let scale = 1.0 / samples as f64;
    Ok([out[0].scaled(scale), out[1].scaled(scale)])
}

/// `(n t)^{-1/2} sum_j G_{j,a} (beta_hat_{j,a} - beta_a)` over the batches
/// with an estimate for `arm`.
pub fn score_statistic(stats: &SufficientStats<f64>, beta: &[f64], arm: Arm, n: usize) -> Vec<f64> {
    let mut s = vec![0.0; beta.len()];
    for e in &stats.entries {
        let fit = e.to_fit();
        let a = fit.arm(arm);
        if let Some(b) = &a.beta_hat {
            let diff: Vec<f64> = b.iter().zip(beta).map(|(x, y)| x - y).collect();
            for (acc, v) in s.iter_mut().zip(a.gram.mul_vec(&diff)) {
                *acc += v;
            }
        }
    }
    let scale = ((n * stats.len()) as f64).sqrt();
    s.iter().map(|v| v / scale).collect()
}

/// Sample covariance (divisor `N - 1`).
pub fn empirical_covariance(vs: &[Vec<f64>]) -> Result<Matrix<f64>> {
    ensure!(vs.len() >= 2, Contract, "covariance needs at least two vectors");
    let d = vs[0].len();
    let n = vs.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vs {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let mut c = Matrix::zeros(d, d);
    for v in vs {
        let centred: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
        c.add_outer(&centred, 1.0);
    }
    Ok(c.scaled(1.0 / (n - 1.0)))
}

/// `||a - b||_2 / ||b||_2` for symmetric matrices.
pub fn relative_spectral_error(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<f64> {
    Ok(spectral_norm(&a.sub(b).symmetrized())? / spectral_norm(b)?)
}
