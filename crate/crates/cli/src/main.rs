use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use batchstop::harness::{
    calibrate_k_with, rerun_inference, run_replications, write_reports, ExperimentConfig, ExperimentRecord, KSource,
    OutputFormat, Prepared,
};
use batchstop::model::{check_assumptions, default_h_grid};
use batchstop::rng::{substream, tag};
use batchstop::stopping::{closed_form_stop_time, scan_predetermined};
use batchstop::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "batchstop", version, about = "Batched contextual bandit experiments with early stopping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run replications and write reports.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Override the number of replications.
        #[arg(long)]
        reps: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated report formats: csv, json.
        #[arg(long, value_delimiter = ',')]
        format: Option<Vec<String>>,
    },
    /// Evaluate a pre-determined stopping rule without simulating.
    StopScan {
        #[command(flatten)]
        common: Common,
    },
    /// Re-run inference on a stored trajectory.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Trajectory JSON written by `simulate`.
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Calibrate the tail constant K on pilot replications.
    CalibrateK {
        #[command(flatten)]
        common: Common,
        /// Number of pilot replications.
        #[arg(long)]
        reps: Option<usize>,
        /// Reference batch index.
        #[arg(long)]
        reference_t: Option<usize>,
    },
    /// Monte Carlo check of the context and margin assumptions.
    CheckAssumptions {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME };
        Failure { code, err: e.into() }
    }
}

fn config_failure(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_CONFIG, err }
}

fn runtime_failure(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_RUNTIME, err }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime_failure(e.into()))?;
    println!("{text}");
    Ok(())
}

fn simulate(
    common: &Common,
    reps: Option<usize>,
    out: Option<&Path>,
    format: Option<&[String]>,
) -> Result<(), Failure> {
    let mut cfg = load(common)?;
    if let Some(r) = reps {
        cfg.replications = r;
    }
    if let Some(f) = format {
        cfg.output.formats = f.iter().map(|s| s.parse()).collect::<Result<Vec<OutputFormat>, Error>>()?;
    }
    if let Some(dir) = out {
        cfg.output.dir = Some(dir.to_path_buf());
    }
    let dir = cfg
        .output
        .dir
        .clone()
        .ok_or_else(|| config_failure(anyhow::anyhow!("no output directory: pass --out or set output.dir")))?;
    let prep = Prepared::new(&cfg)?;
    let run = run_replications(&prep);
    let files = write_reports(&dir, &run, &cfg.output.formats, cfg.output.trajectories)?;
    for f in &files {
        if f.parent() == Some(dir.as_path()) {
            eprintln!("wrote {}", f.display());
        }
    }
    eprintln!(
        "{} of {} replications completed, mean stop time {}",
        run.summary.completed, run.summary.replications, run.summary.stop_time.mean
    );
    if !run.failures.is_empty() {
        for f in &run.failures {
            eprintln!("rep {} (seed {}): {}", f.rep, f.seed, f.error);
        }
        return Err(runtime_failure(anyhow::anyhow!("{} replications failed", run.failures.len())));
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct ScanReport {
    stop_time: usize,
    cap_hit: bool,
    decision: batchstop::StopDecision,
    closed_form: Option<batchstop::stopping::ClosedFormStop<f64>>,
    closed_form_note: Option<String>,
}

fn stop_scan(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    if !cfg.stopping.rule.is_predetermined() {
        return Err(config_failure(anyhow::anyhow!("stop-scan needs a pre-determined stopping rule")));
    }
    let prep = Prepared::new(&cfg)?;
    let decision = scan_predetermined(&prep.rule)?;
    let (closed_form, closed_form_note) = match closed_form_stop_time(&prep.rule) {
        Ok(c) => (Some(c), None),
        Err(e @ Error::Unsupported(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    print_json(&ScanReport {
        stop_time: decision.t,
        cap_hit: decision.cap_hit,
        decision,
        closed_form,
        closed_form_note,
    })
}

fn infer(common: &Common, trajectory: &Path) -> Result<(), Failure> {
    let cfg = load(common)?;
    let text = std::fs::read_to_string(trajectory)
        .with_context(|| format!("cannot read {}", trajectory.display()))
        .map_err(config_failure)?;
    let record: ExperimentRecord = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a trajectory record", trajectory.display()))
        .map_err(config_failure)?;
    let prep = Prepared::new(&cfg)?;
    print_json(&rerun_inference(&prep, &record)?)
}

fn calibrate(common: &Common, reps: Option<usize>, reference_t: Option<usize>) -> Result<(), Failure> {
    let cfg = load(common)?;
    let (default_reps, default_t) = match cfg.bounds.map(|b| b.k) {
        Some(KSource::Calibrate { pilot_reps, reference_t }) => (Some(pilot_reps), Some(reference_t)),
        _ => (None, None),
    };
    let reps = reps.or(default_reps).unwrap_or(batchstop::harness::config::DEFAULT_PILOT_REPS);
    let t = reference_t
        .or(default_t)
        .ok_or_else(|| config_failure(anyhow::anyhow!("pass --reference-t or configure bounds.k.reference_t")))?;
    print_json(&calibrate_k_with(&cfg, reps, t)?)
}

fn assumptions(common: &Common, samples: usize) -> Result<(), Failure> {
    let cfg = load(common)?;
    let mut rng = substream(cfg.seed, tag::CALIBRATION);
    print_json(&check_assumptions(&cfg.context, &cfg.model, samples, &default_h_grid(), &mut rng)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, reps, out, format } => simulate(common, *reps, out.as_deref(), format.as_deref()),
        Command::StopScan { common } => stop_scan(common),
        Command::Infer { common, trajectory } => infer(common, trajectory),
        Command::CalibrateK { common, reps, reference_t } => calibrate(common, *reps, *reference_t),
        Command::CheckAssumptions { common, samples } => assumptions(common, *samples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
