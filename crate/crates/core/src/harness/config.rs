use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{euclidean_context_bound, BoundConstants, BoundParams, CostMode};
use crate::error::{ensure, Error, Result};
use crate::estimators::{SigmaMode, VarianceScaling};
use crate::inference::ConditionalSamplerConfig;
use crate::model::{ContextSpec, TrueModel};
use crate::policies::{ClipSchedule, PolicyKind};
use crate::stopping::{StoppingRule, StoppingRuleSpec, DEFAULT_T_MAX};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REGRET_MC_SAMPLES: usize = 100_000;
pub const DEFAULT_PILOT_REPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleConfig {
    PredeterminedOpportunity,
    PredeterminedThreshold {
        k: f64,
    },
    OnlineThreshold {
        k: f64,
    },
    OnlineOpportunity {
        c_prime: f64,
        /// Compare decrements with `c' n` instead of `c'`.
        #[serde(default)]
        scale_by_batch: bool,
    },
}

impl RuleConfig {
    pub fn is_predetermined(&self) -> bool {
        matches!(self, RuleConfig::PredeterminedOpportunity | RuleConfig::PredeterminedThreshold { .. })
    }
}

fn default_t_max() -> usize {
    DEFAULT_T_MAX
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingConfig {
    pub rule: RuleConfig,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    pub sigma_mode: SigmaMode<f64>,
    #[serde(default)]
    pub scaling: VarianceScaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum KSource {
    Fixed {
        value: f64,
    },
    /// `(1 - delta)` quantile of `max_a ||beta_hat_a - beta_a||_2^2 n t p^2`
    /// over pilot replications stopped at `reference_t`.
    Calibrate {
        #[serde(default = "default_pilot_reps")]
        pilot_reps: usize,
        reference_t: usize,
    },
}

fn default_pilot_reps() -> usize {
    DEFAULT_PILOT_REPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub lambda: f64,
    pub m: f64,
    pub delta: f64,
    /// Unit sampling cost.
    pub c: f64,
    pub k: KSource,
    /// Euclidean context bound; defaults to `sqrt(d)` times the sup-norm bound.
    #[serde(default)]
    pub l_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown output format {other:?}"))),
        }
    }
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
    /// Write one trajectory JSON per replication.
    #[serde(default)]
    pub trajectories: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, formats: default_formats(), trajectories: false }
    }
}

fn default_regret_samples() -> usize {
    DEFAULT_REGRET_MC_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub context: ContextSpec<f64>,
    pub model: TrueModel<f64>,
    pub policy: PolicyKind<f64>,
    pub clip: ClipSchedule<f64>,
    pub batch_size: usize,
    pub stopping: StoppingConfig,
    pub variance: VarianceConfig,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
    #[serde(default)]
    pub inference: Option<ConditionalSamplerConfig<f64>>,
    /// Null hypothesis `(beta_0, beta_1)` tested after each replication.
    #[serde(default)]
    pub hypothesis: Option<[Vec<f64>; 2]>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_regret_samples")]
    pub regret_mc_samples: usize,
    #[serde(default)]
    pub record_propensities: bool,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn dim(&self) -> usize {
        self.context.dim
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            Config,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        self.context.validate()?;
        self.model.validate(self.context.dim)?;
        self.policy.validate()?;
        self.clip.validate()?;
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.stopping.t_max >= 1, Config, "t_max must be at least 1");
        if let SigmaMode::KnownSigma { sigma } = self.variance.sigma_mode {
            ensure!(sigma >= 0.0 && sigma.is_finite(), Config, "known sigma must be non-negative");
        }
        if let Some(b) = &self.bounds {
            ensure!(b.lambda > 0.0 && b.m > 0.0, Config, "lambda and M must be positive");
            ensure!(b.delta > 0.0 && b.delta < 1.0, Config, "delta must lie in (0, 1)");
            ensure!(b.c >= 0.0, Config, "sampling cost must be non-negative");
            ensure!(b.l_bound.is_none_or(|l| l > 0.0), Config, "l_bound must be positive");
            match b.k {
                KSource::Fixed { value } => ensure!(value > 0.0, Config, "K must be positive"),
                KSource::Calibrate { pilot_reps, reference_t } => {
                    ensure!(pilot_reps >= 1, Config, "pilot_reps must be at least 1");
                    ensure!(reference_t >= 1, Config, "reference_t must be at least 1");
                }
            }
            ensure!(self.clip.floor() > 0.0, Config, "regret bounds need a positive clip limit");
        } else {
            ensure!(!self.stopping.rule.is_predetermined(), Config, "pre-determined rules need a bounds section");
        }
        match self.stopping.rule {
            RuleConfig::PredeterminedThreshold { k } => ensure!(k > 0.0, Config, "threshold k must be positive"),
            RuleConfig::OnlineThreshold { k } => ensure!(k >= 0.0, Config, "threshold k must be non-negative"),
            RuleConfig::OnlineOpportunity { c_prime, .. } => ensure!(c_prime > 0.0, Config, "c' must be positive"),
            RuleConfig::PredeterminedOpportunity => {}
        }
        if let Some(inf) = &self.inference {
            inf.validate()?;
        }
        if let Some(h) = &self.hypothesis {
            ensure!(
                h[0].len() == self.dim() && h[1].len() == self.dim(),
                Config,
                "hypothesis vectors must have length {}",
                self.dim()
            );
            ensure!(self.inference.is_some(), Config, "a hypothesis needs an inference section");
        }
        ensure!(self.replications >= 1, Config, "replications must be at least 1");
        ensure!(self.regret_mc_samples >= 1, Config, "regret_mc_samples must be at least 1");
        ensure!(!self.output.formats.is_empty(), Config, "no output formats selected");
        Ok(())
    }

    /// Bound constants for a given `K`.
    pub fn bound_constants(&self, k: f64) -> Result<Option<BoundConstants<f64>>> {
        let Some(b) = &self.bounds else {
            return Ok(None);
        };
        let sigma = match self.variance.sigma_mode {
            SigmaMode::KnownSigma { sigma } => sigma,
            SigmaMode::Residual => self.model.sigma0.max(self.model.sigma1),
        };
        let consts = BoundConstants::new(BoundParams {
            l_bound: b.l_bound.unwrap_or_else(|| euclidean_context_bound(self.dim(), self.context.bound)),
            lambda: b.lambda,
            m: b.m,
            d: self.dim(),
            sigma,
            delta: b.delta,
            k,
            c: b.c,
            n: self.batch_size,
            p_floor: self.clip.floor(),
        })?;
        Ok(Some(consts))
    }

    /// Fixed `K`, if the config provides one.
    pub fn fixed_k(&self) -> Option<f64> {
        match self.bounds?.k {
            KSource::Fixed { value } => Some(value),
            KSource::Calibrate { .. } => None,
        }
    }

    /// Stopping rule with bound constants filled in.
    pub fn rule_spec(&self, consts: Option<&BoundConstants<f64>>) -> Result<StoppingRuleSpec<f64>> {
        let need = || Error::Config("pre-determined rules need bound constants".into());
        let rule = match self.stopping.rule {
            RuleConfig::PredeterminedOpportunity => {
                StoppingRule::PredeterminedOpportunity { consts: *consts.ok_or_else(need)? }
            }
            RuleConfig::PredeterminedThreshold { k } => {
                StoppingRule::PredeterminedThreshold { consts: *consts.ok_or_else(need)?, k }
            }
            RuleConfig::OnlineThreshold { k } => StoppingRule::OnlineThreshold { k },
            RuleConfig::OnlineOpportunity { c_prime, scale_by_batch } => {
                StoppingRule::OnlineOpportunity { c_prime, scale_n: scale_by_batch.then_some(self.batch_size) }
            }
        };
        let spec = StoppingRuleSpec::with_cap(rule, self.stopping.t_max);
        spec.validate()?;
        Ok(spec)
    }

    /// Cost mode matching the stopping rule: threshold rules use the
    /// threshold objective, everything else the additive one.
    pub fn cost_mode(&self) -> CostMode<f64> {
        match self.stopping.rule {
            RuleConfig::PredeterminedThreshold { k } => CostMode::Threshold { k },
            _ => CostMode::Additive,
        }
    }

    /// Whether the hypothesis equals the true coefficients.
    pub fn hypothesis_is_truth(&self) -> bool {
        self.hypothesis.as_ref().is_some_and(|h| h[0] == self.model.beta0 && h[1] == self.model.beta1)
    }
}
