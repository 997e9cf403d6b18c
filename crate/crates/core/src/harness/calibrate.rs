//! Empirical calibration of the tail constant `K`.
//!
//! Pilot replications run to a fixed reference batch `t`. Each contributes
//! `max_a ||beta_hat_a - beta_a||_2^2 n t p^2`, the smallest `K` for which
//! the radius `sqrt(K / (n t p^2))` covers both arms. `K` is the
//! `(1 - delta)` nearest-rank quantile of these values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, KSource};
use crate::harness::runner::{simulate, Horizon, Keep, Setup};
use crate::inference::nearest_rank;
use crate::rng::{derive_seed, substream, tag};
use crate::Arm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCalibration {
    pub k: f64,
    /// Quantile level `1 - delta`.
    pub level: f64,
    pub reference_t: usize,
    pub pilot_reps: usize,
    /// Pilots with a terminal estimate for both arms.
    pub used: usize,
}

/// Seed of pilot replication `i`; disjoint from the replication seeds.
pub fn pilot_seed(master: u64, i: usize) -> u64 {
    derive_seed(derive_seed(master, tag::CALIBRATION), i as u64)
}

/// Calibrates with the pilot settings in the config.
pub fn calibrate_k(cfg: &ExperimentConfig) -> Result<KCalibration> {
    match cfg.bounds.map(|b| b.k) {
        Some(KSource::Calibrate { pilot_reps, reference_t }) => calibrate_k_with(cfg, pilot_reps, reference_t),
        _ => Err(Error::Config("config does not request K calibration".into())),
    }
}

pub fn calibrate_k_with(cfg: &ExperimentConfig, pilot_reps: usize, reference_t: usize) -> Result<KCalibration> {
    let bounds = cfg.bounds.ok_or_else(|| Error::Config("K calibration needs a bounds section".into()))?;
    let stats = pilot_statistics(cfg, pilot_reps, reference_t)?;
    if stats.is_empty() {
        return Err(Error::EstimatorUnavailable {
            arm: Arm::Arm1,
            reason: format!("no pilot replication produced estimates by t = {reference_t}"),
        });
    }
    let level = 1.0 - bounds.delta;
    let mut sorted = stats.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted[nearest_rank(level, sorted.len()) - 1].max(f64::MIN_POSITIVE);
    Ok(KCalibration { k, level, reference_t, pilot_reps, used: stats.len() })
}

/// Per-pilot `max_a ||beta_hat_a - beta_a||_2^2 n t p^2`, in pilot order.
pub fn pilot_statistics(cfg: &ExperimentConfig, pilot_reps: usize, reference_t: usize) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let setup = Setup::from_config(cfg);
    let p = cfg.clip.floor();
    let scale = (cfg.batch_size * reference_t) as f64 * p * p;
    let out: Vec<Result<Option<f64>>> = (0..pilot_reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(pilot_seed(cfg.seed, i), tag::SIMULATION);
            let traj = simulate(&setup, &cfg.model, Horizon::Fixed(reference_t), &mut rng, Keep::default())?;
            Ok(traj.terminal.map(|e| {
                let err = |a: Arm| -> f64 {
                    e.arm(a).beta.iter().zip(cfg.model.beta(a)).map(|(b, t)| (b - t) * (b - t)).sum()
                };
                err(Arm::Arm0).max(err(Arm::Arm1)) * scale
            }))
        })
        .collect();
    let mut stats = Vec::with_capacity(pilot_reps);
    for r in out {
        if let Some(v) = r? {
            stats.push(v);
        }
    }
    Ok(stats)
}
