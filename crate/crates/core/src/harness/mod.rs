//! Experiment harness: JSON configuration, seeded replications, K
//! calibration, aggregate metrics and report files.
//!
//! Replication `r` of an experiment with master seed `s` runs on the seed
//! `derive_seed(s, r)`; see [`crate::rng`]. Its simulation, regret oracle and
//! inference draw from separate sub-streams of that seed.

pub mod calibrate;
pub mod config;
pub mod diagnostics;
pub mod report;
pub mod runner;

pub use calibrate::{calibrate_k, calibrate_k_with, KCalibration};
pub use config::{
    BoundsConfig, ExperimentConfig, KSource, OutputConfig, OutputFormat, RuleConfig, StoppingConfig, VarianceConfig,
};
pub use report::{replications_csv, summarize, summary_json, write_reports, Summary};
pub use runner::{
    policy_regret, record_samples, replay_stop_trace, rerun_inference, run_experiment, run_experiment_seeded,
    run_replications, run_reps, ExperimentRecord, Prepared, RepFailure, RunOutput,
};

#[cfg(test)]
pub(crate) fn test_config() -> ExperimentConfig {
    use crate::estimators::SigmaMode;
    use crate::inference::ConditionalSamplerConfig;
    use crate::model::{ContextSpec, TrueModel};
    use crate::policies::{ClipSchedule, PolicyKind, Schedule};

    ExperimentConfig {
        schema_version: config::SCHEMA_VERSION,
        context: ContextSpec::intercept_uniform(2),
        model: TrueModel::homoskedastic(vec![0.0, -0.5], vec![0.3, 1.0], 1.0),
        policy: PolicyKind::EpsGreedy { eps: Schedule::constant(0.2) },
        clip: ClipSchedule::constant(0.2),
        batch_size: 50,
        stopping: StoppingConfig { rule: RuleConfig::OnlineThreshold { k: 0.02 }, t_max: 200 },
        variance: VarianceConfig { sigma_mode: SigmaMode::KnownSigma { sigma: 1.0 }, scaling: Default::default() },
        bounds: Some(BoundsConfig {
            lambda: 1.0,
            m: 1.0,
            delta: 0.1,
            c: 0.001,
            k: KSource::Fixed { value: 1.0 },
            l_bound: None,
        }),
        inference: Some(ConditionalSamplerConfig::shortcut(200, 0.95)),
        hypothesis: Some([vec![0.0, -0.5], vec![0.3, 1.0]]),
        replications: 4,
        seed: 20240601,
        regret_mc_samples: 2000,
        record_propensities: false,
        output: OutputConfig::default(),
    }
}
