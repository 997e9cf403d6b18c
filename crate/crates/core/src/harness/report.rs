use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::ExtReal;
use crate::error::{ensure, Result};
use crate::harness::calibrate::KCalibration;
use crate::harness::config::{ExperimentConfig, OutputFormat, SCHEMA_VERSION};
use crate::harness::runner::{ExperimentRecord, Prepared, RepFailure, RunOutput};
use crate::inference::stack;

/// Two-sided 95% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub count: usize,
    pub total: usize,
    pub rate: f64,
}

impl Rate {
    fn new(count: usize, total: usize) -> Option<Self> {
        (total > 0).then(|| Rate { count, total, rate: count as f64 / total as f64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopTimeSummary {
    /// Stop time -> number of replications.
    pub histogram: BTreeMap<usize, usize>,
    pub mean: f64,
    pub cap_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CregSummary {
    /// Mean and sample sd over finite values.
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub finite: usize,
    pub infinite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// All `2d` coordinates covered at once.
    pub joint: f64,
    /// Arm 0's coordinates, then arm 1's.
    pub per_coordinate: Vec<f64>,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub replications: usize,
    pub completed: usize,
    pub failures: Vec<RepFailure>,
    pub k: Option<f64>,
    pub k_calibration: Option<KCalibration>,
    pub stop_time: StopTimeSummary,
    pub regret_mean: Option<f64>,
    pub creg: Option<CregSummary>,
    pub cumulative_creg_mean: Option<f64>,
    /// Replications whose estimated regret exceeds `U(T)`.
    pub bound_violation: Option<Rate>,
    /// Share of replications with `|beta_hat - beta| <= 1.96 sd` per coordinate.
    pub standardized_coverage: Option<Coverage>,
    /// Coverage of the inference intervals at the true coefficients.
    pub interval_coverage: Option<Coverage>,
    pub rejection: Option<Rate>,
    /// Rejection rate when the hypothesis is the true model.
    pub type_one_error: Option<f64>,
    pub inference_failures: usize,
    pub mean_acceptance_rate: Option<f64>,
    pub config: ExperimentConfig,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_sd(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

fn coverage(hits: &[Vec<bool>]) -> Option<Coverage> {
    let first = hits.first()?;
    let n = hits.len() as f64;
    let per_coordinate = (0..first.len()).map(|j| hits.iter().filter(|h| h[j]).count() as f64 / n).collect();
    let joint = hits.iter().filter(|h| h.iter().all(|&b| b)).count() as f64 / n;
    Some(Coverage { joint, per_coordinate, evaluated: hits.len() })
}

/// Standardized-error coverage indicators for one record.
pub fn standardized_hits(rec: &ExperimentRecord, truth: &[Vec<f64>; 2]) -> Option<Vec<bool>> {
    let term = rec.terminal.as_ref()?;
    let mut hits = Vec::new();
    for (a, arm) in term.arms.iter().enumerate() {
        for j in 0..arm.beta.len() {
            let sd = arm.sigma_hat[(j, j)].sqrt();
            hits.push((arm.beta[j] - truth[a][j]).abs() <= Z_975 * sd);
        }
    }
    Some(hits)
}

pub fn interval_hits(rec: &ExperimentRecord, truth: &[Vec<f64>; 2]) -> Option<Vec<bool>> {
    let inf = rec.inference.as_ref()?;
    Some(
        inf.intervals.iter().zip(truth).flat_map(|(ivs, b)| ivs.iter().zip(b).map(|(iv, v)| iv.contains(*v))).collect(),
    )
}

/// Aggregates records, which must already be sorted by replication index.
pub fn summarize(prep: &Prepared, records: &[ExperimentRecord], failures: &[RepFailure]) -> Summary {
    let cfg = &prep.config;
    let truth = [cfg.model.beta0.clone(), cfg.model.beta1.clone()];
    let mut histogram = BTreeMap::new();
    for r in records {
        *histogram.entry(r.stop_time).or_insert(0) += 1;
    }
    let stops: Vec<f64> = records.iter().map(|r| r.stop_time as f64).collect();
    let regrets: Vec<f64> = records.iter().filter_map(|r| r.regret_hat).collect();

    let creg = prep.consts.map(|_| {
        let finite: Vec<f64> = records.iter().filter_map(|r| r.creg.and_then(|c| c.value.finite())).collect();
        let infinite = records.iter().filter(|r| r.creg.is_some_and(|c| c.value.is_infinite())).count();
        CregSummary { mean: mean(&finite), sd: sample_sd(&finite), finite: finite.len(), infinite }
    });
    let cumulative: Vec<f64> = records.iter().filter_map(|r| r.cumulative_creg).collect();

    let violations: Vec<bool> = records.iter().filter_map(ExperimentRecord::bound_violated).collect();
    let std_hits: Vec<Vec<bool>> = records.iter().filter_map(|r| standardized_hits(r, &truth)).collect();
    let int_hits: Vec<Vec<bool>> = records.iter().filter_map(|r| interval_hits(r, &truth)).collect();
    let rejects: Vec<bool> = records.iter().filter_map(|r| r.inference.as_ref().and_then(|i| i.reject)).collect();
    let rejection = Rate::new(rejects.iter().filter(|&&b| b).count(), rejects.len());
    let rates: Vec<f64> = records.iter().filter_map(|r| r.inference.as_ref().map(|i| i.acceptance_rate)).collect();

    Summary {
        schema_version: SCHEMA_VERSION,
        replications: cfg.replications,
        completed: records.len(),
        failures: failures.to_vec(),
        k: prep.consts.map(|c| c.k),
        k_calibration: prep.calibration.clone(),
        stop_time: StopTimeSummary {
            histogram,
            mean: mean(&stops).unwrap_or(0.0),
            cap_hits: records.iter().filter(|r| r.cap_hit).count(),
        },
        regret_mean: mean(&regrets),
        creg,
        cumulative_creg_mean: mean(&cumulative),
        bound_violation: Rate::new(violations.iter().filter(|&&v| v).count(), violations.len()),
        standardized_coverage: coverage(&std_hits),
        interval_coverage: coverage(&int_hits),
        type_one_error: rejection.as_ref().filter(|_| cfg.hypothesis_is_truth()).map(|r| r.rate),
        rejection,
        inference_failures: records.iter().filter(|r| r.inference_error.is_some()).count(),
        mean_acceptance_rate: mean(&rates),
        config: cfg.clone(),
    }
}

pub const CSV_FIXED_COLUMNS: [&str; 8] =
    ["rep", "seed", "stop_time", "cap_hit", "regret_hat", "creg", "var_norm_arm0", "var_norm_arm1"];

pub fn csv_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for a in 0..2 {
        for j in 0..dim {
            h.push(format!("ci_lo_arm{a}_{j}"));
            h.push(format!("ci_hi_arm{a}_{j}"));
        }
    }
    h.push("reject".into());
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `replications.csv`: one row per completed replication. Floats use the
/// shortest representation that round-trips; missing values are empty and
/// an infinite cost-adjusted regret is `INF`.
pub fn replications_csv(records: &[ExperimentRecord], dim: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(dim))?;
    for r in records {
        let mut row = vec![
            r.rep.to_string(),
            r.seed.to_string(),
            r.stop_time.to_string(),
            r.cap_hit.to_string(),
            opt(r.regret_hat),
            match r.creg.map(|c| c.value) {
                Some(ExtReal::Finite(v)) => v.to_string(),
                Some(ExtReal::Infinite) => "INF".into(),
                None => String::new(),
            },
            opt(r.var_norms.map(|v| v[0])),
            opt(r.var_norms.map(|v| v[1])),
        ];
        match &r.inference {
            Some(inf) => {
                for iv in inf.intervals.iter().flatten() {
                    row.push(iv.lo.to_string());
                    row.push(iv.hi.to_string());
                }
            }
            None => row.extend(std::iter::repeat_n(String::new(), 4 * dim)),
        }
        row.push(opt(r.inference.as_ref().and_then(|i| i.reject)));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    Ok(serde_json::to_string_pretty(summary)? + "\n")
}

/// Stacked true coefficients, in CSV coordinate order.
pub fn truth_vector(cfg: &ExperimentConfig) -> Vec<f64> {
    stack(&[cfg.model.beta0.clone(), cfg.model.beta1.clone()])
}

/// Writes the requested reports into `dir`. Everything is rendered before
/// the first file is written.
pub fn write_reports(
    dir: &Path,
    run: &RunOutput,
    formats: &[OutputFormat],
    trajectories: bool,
) -> Result<Vec<PathBuf>> {
    ensure!(!run.records.is_empty() || !run.failures.is_empty(), Contract, "nothing to report");
    let cfg = &run.summary.config;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if formats.contains(&OutputFormat::Csv) {
        files.push((dir.join("replications.csv"), replications_csv(&run.records, cfg.dim())?));
    }
    if trajectories {
        for r in &run.records {
            files.push((dir.join("trajectories").join(format!("rep_{:05}.json", r.rep)), serde_json::to_string(r)?));
        }
    }
    if formats.contains(&OutputFormat::Json) {
        files.push((dir.join("summary.json"), summary_json(&run.summary)?));
    }
    fs::create_dir_all(dir)?;
    if trajectories {
        fs::create_dir_all(dir.join("trajectories"))?;
    }
    let mut written = Vec::with_capacity(files.len());
    for (path, text) in files {
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runner::run_replications;
    use crate::harness::test_config;

    #[test]
    fn one_record_gives_header_and_one_row() {
        let mut cfg = test_config();
        cfg.replications = 1;
        let run = run_replications(&Prepared::new(&cfg).unwrap());
        let csv = replications_csv(&run.records, cfg.dim()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with(
            "rep,seed,stop_time,cap_hit,regret_hat,creg,var_norm_arm0,var_norm_arm1,ci_lo_arm0_0,ci_hi_arm0_0"
        ));
        assert!(lines[0].ends_with(",reject"));
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
    }

    #[test]
    fn summary_round_trips() {
        let cfg = test_config();
        let run = run_replications(&Prepared::new(&cfg).unwrap());
        let text = summary_json(&run.summary).unwrap();
        let back: Summary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, run.summary);
    }

    #[test]
    fn infinite_creg_is_a_marker() {
        let cfg = test_config();
        let mut run = run_replications(&Prepared::new(&cfg).unwrap());
        let c = run.records[0].creg.as_mut().unwrap();
        c.value = ExtReal::Infinite;
        let csv = replications_csv(&run.records, cfg.dim()).unwrap();
        assert!(csv.lines().nth(1).unwrap().split(',').nth(5) == Some("INF"));
        let json = serde_json::to_string(&run.records[0]).unwrap();
        assert!(json.contains("\"infinite\""));
    }

    #[test]
    fn writes_into_fresh_directory() {
        let cfg = test_config();
        let run = run_replications(&Prepared::new(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested");
        let files = write_reports(&out, &run, &[OutputFormat::Csv, OutputFormat::Json], true).unwrap();
        assert!(out.join("replications.csv").exists() && out.join("summary.json").exists());
        assert_eq!(files.len(), 2 + run.records.len());
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let cfg = test_config();
        let run = run_replications(&Prepared::new(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_reports(&blocker.join("out"), &run, &[OutputFormat::Json], false).unwrap_err();
        assert!(matches!(err, crate::Error::Io(_)));
        assert!(!blocker.join("out").join("summary.json").exists());
    }
}
