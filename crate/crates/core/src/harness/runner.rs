use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{cost_adjusted_regret, regret_bound_time, BoundConstants, CostAdjustedRegret};
use crate::error::{Error, Result};
use crate::estimators::{fit_batch_ols, IvwAccumulator, IvwEstimate, SigmaMode, SufficientStats};
use crate::harness::calibrate::{calibrate_k, KCalibration};
use crate::harness::config::{ExperimentConfig, VarianceConfig};
use crate::harness::report::{summarize, Summary};
use crate::inference::{
    run_inference, sample_conditional, ConditionalSamplerConfig, ConditionalSamples, ConditionalTarget,
    InferenceResult, Resimulator, Surrogate,
};
use crate::model::{realize_rewards, sample_batch_contexts, ContextSpec, TrueModel};
use crate::policies::{select_actions, ClipSchedule, PolicyKind, PolicyState, Propensity};
use crate::rng::{derive_seed, substream, tag, Stream};
use crate::scalar::dot;
use crate::stopping::{evaluate_norms, norms, StopDecision, StoppingRuleSpec};
use crate::Arm;

const REGRET_CHUNK: usize = 8192;

/// Everything a single trajectory needs besides the reward model.
#[derive(Debug, Clone)]
pub(crate) struct Setup {
    pub context: ContextSpec<f64>,
    pub policy: PolicyKind<f64>,
    pub clip: ClipSchedule<f64>,
    pub n: usize,
    pub variance: VarianceConfig,
}

impl Setup {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            context: cfg.context.clone(),
            policy: cfg.policy,
            clip: cfg.clip,
            n: cfg.batch_size,
            variance: cfg.variance,
        }
    }

    fn estimate(&self, acc: &IvwAccumulator<f64>) -> Result<Option<IvwEstimate<f64>>> {
        match acc.estimate(self.variance.sigma_mode, self.variance.scaling, self.n) {
            Ok(e) => Ok(Some(e)),
            Err(Error::EstimatorUnavailable { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Horizon<'a> {
    Rule(&'a StoppingRuleSpec<f64>),
    Fixed(usize),
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Trajectory {
    pub stats: SufficientStats<f64>,
    pub trace: Vec<StopDecision<f64>>,
    pub stop_time: usize,
    pub cap_hit: bool,
    pub terminal: Option<IvwEstimate<f64>>,
    pub propensities: Vec<Vec<Propensity<f64>>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Keep {
    pub stats: bool,
    pub propensities: bool,
}

/// Runs the batch protocol until the horizon stops it.
pub(crate) fn simulate(
    setup: &Setup,
    model: &TrueModel<f64>,
    horizon: Horizon<'_>,
    rng: &mut Stream,
    keep: Keep,
) -> Result<Trajectory> {
    let d = setup.context.dim;
    let mut state = PolicyState::new(d);
    let mut acc = IvwAccumulator::new(d);
    let mut out = Trajectory::default();
    let online = matches!(horizon, Horizon::Rule(spec) if spec.is_online());
    let mut prev_norms = None;
    let mut current = None;
    for t in 1.. {
        let contexts = sample_batch_contexts(&setup.context, setup.n, rng)?;
        let acts = select_actions(&setup.policy, &state, &contexts, &setup.clip, rng)?;
        let rewards = realize_rewards(model, &contexts, &acts.actions, rng)?;
        let fit = fit_batch_ols(t, &contexts, &acts.actions, &rewards)?;
        state.absorb(&fit)?;
        acc.push(&fit)?;
        if keep.stats {
            out.stats.push(&fit);
        }
        if keep.propensities {
            out.propensities.push(acts.propensities);
        }
        let stop = match horizon {
            Horizon::Fixed(limit) => t >= limit,
            Horizon::Rule(spec) => {
                let cur_norms = if online {
                    current = setup.estimate(&acc)?;
                    current
                        .as_ref()
                        .map(|e| norms(&[e.arms[0].sigma_hat.clone(), e.arms[1].sigma_hat.clone()]))
                        .transpose()?
                } else {
                    None
                };
                let decision = evaluate_norms(spec, t, cur_norms, prev_norms)?;
                prev_norms = cur_norms;
                out.cap_hit = decision.cap_hit;
                out.trace.push(decision);
                decision.stop
            }
        };
        if stop {
            out.stop_time = t;
            break;
        }
    }
    out.terminal = if online { current } else { setup.estimate(&acc)? };
    Ok(out)
}

/// Recomputes the stop trace from stored sufficient statistics.
pub fn replay_stop_trace(
    cfg: &ExperimentConfig,
    spec: &StoppingRuleSpec<f64>,
    stats: &SufficientStats<f64>,
) -> Result<Vec<StopDecision<f64>>> {
    let setup = Setup::from_config(cfg);
    let mut acc = IvwAccumulator::new(cfg.dim());
    let mut prev = None;
    let mut trace = Vec::with_capacity(stats.len());
    for (i, entry) in stats.entries.iter().enumerate() {
        acc.push(&entry.to_fit())?;
        let cur = if spec.is_online() {
            setup
                .estimate(&acc)?
                .map(|e| norms(&[e.arms[0].sigma_hat.clone(), e.arms[1].sigma_hat.clone()]))
                .transpose()?
        } else {
            None
        };
        trace.push(evaluate_norms(spec, i + 1, cur, prev)?);
        prev = cur;
    }
    Ok(trace)
}

/// Monte Carlo regret `E[|Delta^T x| 1{learned arm != optimal arm}]` of the
/// greedy policy built from `beta_hat`.
pub fn policy_regret(
    model: &TrueModel<f64>,
    context: &ContextSpec<f64>,
    beta_hat: &[Vec<f64>; 2],
    samples: usize,
    rng: &mut Stream,
) -> Result<f64> {
    let effect = model.effect();
    let learned: Vec<f64> = beta_hat[1].iter().zip(&beta_hat[0]).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    let mut left = samples;
    while left > 0 {
        let m = left.min(REGRET_CHUNK);
        let xs = sample_batch_contexts(context, m, rng)?;
        for x in xs.iter_rows() {
            let gap = dot(&effect, x);
            if (dot(&learned, x) > 0.0) != (gap > 0.0) {
                total += gap.abs();
            }
        }
        left -= m;
    }
    Ok(total / samples as f64)
}

/// Plug-in model for resimulation: terminal IVW coefficients, known or
/// residual noise level, the true model's noise family.
pub fn plugin_model(cfg: &ExperimentConfig, terminal: &IvwEstimate<f64>) -> TrueModel<f64> {
    let sigma = |a: Arm| match cfg.variance.sigma_mode {
        SigmaMode::KnownSigma { sigma } => sigma,
        SigmaMode::Residual => terminal.arm(a).noise_variance.sqrt(),
    };
    TrueModel {
        beta0: terminal.arm(Arm::Arm0).beta.clone(),
        beta1: terminal.arm(Arm::Arm1).beta.clone(),
        sigma0: sigma(Arm::Arm0),
        sigma1: sigma(Arm::Arm1),
        noise: cfg.model.noise,
    }
}

pub(crate) struct PluginResimulator {
    setup: Setup,
    model: TrueModel<f64>,
    rule: StoppingRuleSpec<f64>,
}

impl Resimulator<f64> for PluginResimulator {
    fn resimulate(&self, rng: &mut Stream) -> Result<Surrogate<f64>> {
        let traj = simulate(&self.setup, &self.model, Horizon::Rule(&self.rule), rng, Keep::default())?;
        Ok(Surrogate { stop_time: traj.stop_time, beta: traj.terminal.map(|e| terminal_betas(&e)) })
    }
}

fn terminal_betas(e: &IvwEstimate<f64>) -> [Vec<f64>; 2] {
    [e.arms[0].beta.clone(), e.arms[1].beta.clone()]
}

pub fn conditional_target(stop_time: usize, terminal: &IvwEstimate<f64>) -> ConditionalTarget<f64> {
    ConditionalTarget {
        stop_time,
        beta: terminal_betas(terminal),
        sigma_hat: [terminal.arms[0].sigma_hat.clone(), terminal.arms[1].sigma_hat.clone()],
    }
}

/// Validated config with resolved bound constants and stopping rule.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub consts: Option<BoundConstants<f64>>,
    pub rule: StoppingRuleSpec<f64>,
    pub calibration: Option<KCalibration>,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (k, calibration) = match (config.fixed_k(), config.bounds) {
            (Some(k), _) => (Some(k), None),
            (None, Some(_)) => {
                let cal = calibrate_k(config)?;
                (Some(cal.k), Some(cal))
            }
            (None, None) => (None, None),
        };
        let consts = match k {
            Some(k) => config.bound_constants(k)?,
            None => None,
        };
        let rule = config.rule_spec(consts.as_ref())?;
        Ok(Self { config: config.clone(), consts, rule, calibration })
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.config.seed, rep as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub rep: usize,
    pub seed: u64,
    pub stop_time: usize,
    pub cap_hit: bool,
    pub stats: SufficientStats<f64>,
    pub trace: Vec<StopDecision<f64>>,
    /// Terminal IVW estimate; `None` if an arm never had a usable batch.
    pub terminal: Option<IvwEstimate<f64>>,
    /// Spectral norms of the terminal covariance estimates.
    pub var_norms: Option<[f64; 2]>,
    /// Monte Carlo regret of the learned greedy policy.
    pub regret_hat: Option<f64>,
    /// Regret bound `U(T)`.
    pub bound: Option<f64>,
    pub creg: Option<CostAdjustedRegret<f64>>,
    /// `sum_{t <= T} U(t) + c n T`.
    pub cumulative_creg: Option<f64>,
    pub inference: Option<InferenceResult<f64>>,
    pub inference_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensities: Option<Vec<Vec<Propensity<f64>>>>,
}

impl ExperimentRecord {
    pub fn bound_violated(&self) -> Option<bool> {
        Some(self.regret_hat? > self.bound?)
    }
}

pub fn run_experiment(prep: &Prepared, rep: usize) -> Result<ExperimentRecord> {
    run_experiment_seeded(prep, rep, prep.rep_seed(rep))
}

/// [`run_experiment`] with an explicit replication seed.
pub fn run_experiment_seeded(prep: &Prepared, rep: usize, seed: u64) -> Result<ExperimentRecord> {
    let cfg = &prep.config;
    let setup = Setup::from_config(cfg);
    let keep = Keep { stats: true, propensities: cfg.record_propensities };
    let traj = simulate(&setup, &cfg.model, Horizon::Rule(&prep.rule), &mut substream(seed, tag::SIMULATION), keep)?;
    let t = traj.stop_time;

    let var_norms = traj
        .terminal
        .as_ref()
        .map(|e| norms(&[e.arms[0].sigma_hat.clone(), e.arms[1].sigma_hat.clone()]))
        .transpose()?;
    let regret_hat = traj
        .terminal
        .as_ref()
        .map(|e| {
            let mut rng = substream(seed, tag::REGRET);
            policy_regret(&cfg.model, &cfg.context, &terminal_betas(e), cfg.regret_mc_samples, &mut rng)
        })
        .transpose()?;

    let (bound, creg, cumulative_creg) = match &prep.consts {
        Some(c) => {
            let u = regret_bound_time(t, c)?;
            let mut cumulative = c.c * (c.n * t) as f64;
            for s in 1..=t {
                cumulative += regret_bound_time(s, c)?;
            }
            (Some(u), Some(cost_adjusted_regret(u, t, c, cfg.cost_mode())), Some(cumulative))
        }
        None => (None, None, None),
    };

    let (inference, inference_error) = match (&cfg.inference, &traj.terminal) {
        (None, _) => (None, None),
        (Some(_), None) => (None, Some("no terminal estimate for one of the arms".to_string())),
        (Some(icfg), Some(term)) => {
            let resim = PluginResimulator { setup: setup.clone(), model: plugin_model(cfg, term), rule: prep.rule };
            let target = conditional_target(t, term);
            match run_inference(&target, icfg, Some(&resim), cfg.hypothesis.as_ref(), derive_seed(seed, tag::INFERENCE))
            {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            }
        }
    };

    Ok(ExperimentRecord {
        rep,
        seed,
        stop_time: t,
        cap_hit: traj.cap_hit,
        stats: traj.stats,
        trace: traj.trace,
        terminal: traj.terminal,
        var_norms,
        regret_hat,
        bound,
        creg,
        cumulative_creg,
        inference,
        inference_error,
        propensities: cfg.record_propensities.then_some(traj.propensities),
    })
}

fn record_inputs<'a>(
    prep: &Prepared,
    record: &'a ExperimentRecord,
) -> Result<(ConditionalSamplerConfig<f64>, &'a IvwEstimate<f64>, PluginResimulator)> {
    let cfg = &prep.config;
    let icfg = cfg.inference.ok_or_else(|| Error::Config("config has no inference section".into()))?;
    let term = record
        .terminal
        .as_ref()
        .ok_or(Error::EstimatorUnavailable { arm: Arm::Arm1, reason: "record has no terminal estimate".into() })?;
    let resim = PluginResimulator { setup: Setup::from_config(cfg), model: plugin_model(cfg, term), rule: prep.rule };
    Ok((icfg, term, resim))
}

/// Re-runs inference from a stored record, reproducing the original draws.
pub fn rerun_inference(prep: &Prepared, record: &ExperimentRecord) -> Result<InferenceResult<f64>> {
    let (icfg, term, resim) = record_inputs(prep, record)?;
    run_inference(
        &conditional_target(record.stop_time, term),
        &icfg,
        Some(&resim),
        prep.config.hypothesis.as_ref(),
        derive_seed(record.seed, tag::INFERENCE),
    )
}

/// The conditional samples behind a record's inference result.
pub fn record_samples(prep: &Prepared, record: &ExperimentRecord) -> Result<ConditionalSamples<f64>> {
    let (icfg, term, resim) = record_inputs(prep, record)?;
    sample_conditional(
        &conditional_target(record.stop_time, term),
        &icfg,
        Some(&resim),
        derive_seed(record.seed, tag::INFERENCE),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub rep: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<RepFailure>,
    pub summary: Summary,
}

/// Runs the given replication indices in parallel. The result is sorted by
/// replication index whatever the order of `reps`.
pub fn run_reps(prep: &Prepared, reps: &[usize]) -> (Vec<ExperimentRecord>, Vec<RepFailure>) {
    let outcomes: Vec<(usize, Result<ExperimentRecord>)> =
        reps.par_iter().map(|&r| (r, run_experiment(prep, r))).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rep, out) in outcomes {
        match out {
            Ok(r) => records.push(r),
            Err(e) => failures.push(RepFailure { rep, seed: prep.rep_seed(rep), error: e.to_string() }),
        }
    }
    records.sort_by_key(|r| r.rep);
    failures.sort_by_key(|f| f.rep);
    (records, failures)
}

pub fn run_replications(prep: &Prepared) -> RunOutput {
    let reps: Vec<usize> = (0..prep.config.replications).collect();
    let (records, failures) = run_reps(prep, &reps);
    let summary = summarize(prep, &records, &failures);
    RunOutput { records, failures, summary }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RuleConfig;
    use crate::harness::test_config;
    use crate::stopping::StopDiagnostics;

    #[test]
    fn vacuous_threshold_stops_at_first_batch() {
        let mut cfg = test_config();
        cfg.policy = PolicyKind::UniformRandom;
        cfg.stopping.rule = RuleConfig::OnlineThreshold { k: 1e12 };
        let prep = Prepared::new(&cfg).unwrap();
        let rec = run_experiment(&prep, 0).unwrap();
        assert_eq!(rec.stop_time, 1);
        assert!(!rec.cap_hit);
    }

    #[test]
    fn predetermined_rule_stops_at_ten_regardless_of_data() {
        let mut cfg = test_config();
        cfg.batch_size = 100;
        cfg.stopping.rule = RuleConfig::PredeterminedOpportunity;
        // K'' = K' / (n p^2) = 100 with lambda = 1, M = 1
        let p = cfg.clip.floor();
        let kp = 100.0 * 100.0 * p * p;
        let l = (cfg.dim() as f64).sqrt() * cfg.context.bound;
        let b = cfg.bounds.as_mut().unwrap();
        b.c = 0.01;
        b.k = crate::harness::config::KSource::Fixed { value: crate::bounds::k_for_k_prime(kp, l, 1.0, 1.0) };
        let prep = Prepared::new(&cfg).unwrap();
        for rep in 0..3 {
            let rec = run_experiment(&prep, rep).unwrap();
            assert_eq!(rec.stop_time, 10);
            assert!(matches!(rec.trace[0].diagnostics, StopDiagnostics::Bounds { .. }));
        }
    }

    #[test]
    fn records_are_deterministic() {
        let prep = Prepared::new(&test_config()).unwrap();
        let a = run_experiment(&prep, 3).unwrap();
        let b = run_experiment(&prep, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = run_experiment(&prep, 4).unwrap();
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn identical_seeds_give_identical_records() {
        let prep = Prepared::new(&test_config()).unwrap();
        let seed = prep.rep_seed(0);
        let mut a = run_experiment_seeded(&prep, 0, seed).unwrap();
        let b = run_experiment_seeded(&prep, 1, seed).unwrap();
        assert_eq!(a.rep, 0);
        a.rep = 1;
        assert_eq!(a, b);
    }

    #[test]
    fn replay_matches_logged_trace() {
        for rule in [
            RuleConfig::OnlineThreshold { k: 0.02 },
            RuleConfig::OnlineOpportunity { c_prime: 0.002, scale_by_batch: false },
            RuleConfig::PredeterminedOpportunity,
        ] {
            let mut cfg = test_config();
            cfg.stopping.rule = rule;
            let prep = Prepared::new(&cfg).unwrap();
            for rep in 0..4 {
                let rec = run_experiment(&prep, rep).unwrap();
                let replayed = replay_stop_trace(&cfg, &prep.rule, &rec.stats).unwrap();
                assert_eq!(replayed, rec.trace, "{rule:?} rep {rep}");
            }
        }
    }

    #[test]
    fn rerun_inference_reproduces_record() {
        let prep = Prepared::new(&test_config()).unwrap();
        let rec = run_experiment(&prep, 1).unwrap();
        assert_eq!(Some(rerun_inference(&prep, &rec).unwrap()), rec.inference);
    }

    #[test]
    fn regret_zero_for_true_coefficients() {
        let cfg = test_config();
        let beta = [cfg.model.beta0.clone(), cfg.model.beta1.clone()];
        let r = policy_regret(&cfg.model, &cfg.context, &beta, 10_000, &mut substream(1, tag::REGRET)).unwrap();
        assert_eq!(r, 0.0);
        let flipped = [beta[1].clone(), beta[0].clone()];
        let r = policy_regret(&cfg.model, &cfg.context, &flipped, 10_000, &mut substream(1, tag::REGRET)).unwrap();
        assert!(r > 0.0);
    }

    #[test]
    fn propensities_recorded_on_request() {
        let mut cfg = test_config();
        cfg.record_propensities = true;
        let prep = Prepared::new(&cfg).unwrap();
        let rec = run_experiment(&prep, 0).unwrap();
        let p = rec.propensities.unwrap();
        assert_eq!(p.len(), rec.stop_time);
        assert!(p.iter().all(|b| b.len() == cfg.batch_size));
        let floor = cfg.clip.floor();
        assert!(p.iter().flatten().all(|q| q.post_clip >= floor && q.post_clip <= 1.0 - floor));
    }

    #[test]
    fn failures_are_recorded_per_rep() {
        let prep = Prepared::new(&test_config()).unwrap();
        let (records, failures) = run_reps(&prep, &[2, 0, 1]);
        assert_eq!(records.iter().map(|r| r.rep).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(failures.is_empty());
    }
}
