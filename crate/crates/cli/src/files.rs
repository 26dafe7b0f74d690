//! File formats: JSON scenarios and measurement batches, CSV results,
//! estimates, traces and sweep tables, and text association checkpoints.
//!
//! Every file carries a `schema_version` field (a column in CSV files, a
//! top-level field in JSON, a header line in checkpoints). Errors split into
//! two kinds matching the process exit codes: configuration errors (exit 2)
//! for semantically invalid settings, and data errors (exit 3) for unreadable,
//! unwritable or malformed files.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use tpmbm::assoc::Theta;
use tpmbm::estimator::TrajectoryEstimate;
use tpmbm::metrics::{GospaResult, MetricTrack};
use tpmbm::recursion::Batch;
use tpmbm::sim::{benchmark_scenario, LabelledBatch, Scenario, TruthTrajectory};
use tpmbm::SCHEMA_VERSION;

#[derive(Debug, Clone)]
pub enum CliError {
    /// Invalid settings: wrong flag combinations, out-of-range parameters.
    Config(String),
    /// Unreadable, unwritable, or malformed files.
    Data(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    /// Process exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tpmbm::Error> for CliError {
    fn from(e: tpmbm::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Scenario file: the scenario fields plus a schema version.
#[derive(Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub scenario: Scenario,
}

#[derive(Serialize, Deserialize)]
pub struct TruthDto {
    pub birth: usize,
    pub states: Vec<[f64; 4]>,
}

/// Batch file: the scenario it came from, the sampled truth, the measurement
/// scans and the per-measurement origin labels (object index or null).
#[derive(Serialize, Deserialize)]
pub struct BatchFile {
    pub schema_version: u32,
    pub scenario: Scenario,
    /// Stream index of the generator that produced the measurements.
    pub measurement_stream: u64,
    pub truth: Vec<TruthDto>,
    pub scans: Vec<Vec<[f64; 2]>>,
    pub origins: Vec<Vec<Option<usize>>>,
}

impl BatchFile {
    pub fn from_parts(
        scenario: &Scenario,
        measurement_stream: u64,
        truth: &[TruthTrajectory],
        batch: &LabelledBatch,
    ) -> Self {
        BatchFile {
            schema_version: SCHEMA_VERSION,
            scenario: scenario.clone(),
            measurement_stream,
            truth: truth
                .iter()
                .map(|tr| TruthDto {
                    birth: tr.birth,
                    states: tr.states.iter().map(|s| [s[0], s[1], s[2], s[3]]).collect(),
                })
                .collect(),
            scans: batch
                .scans
                .iter()
                .map(|scan| scan.iter().map(|z| [z[0], z[1]]).collect())
                .collect(),
            origins: batch.origins.clone(),
        }
    }

    pub fn truth_trajectories(&self) -> Vec<TruthTrajectory> {
        self.truth
            .iter()
            .map(|t| TruthTrajectory {
                birth: t.birth,
                states: t
                    .states
                    .iter()
                    .map(|s| nalgebra::Vector4::from_column_slice(s))
                    .collect(),
            })
            .collect()
    }

    pub fn labelled(&self) -> LabelledBatch {
        LabelledBatch {
            scans: self
                .scans
                .iter()
                .map(|scan| scan.iter().map(|z| Vector2::new(z[0], z[1])).collect())
                .collect(),
            origins: self.origins.clone(),
        }
    }
}

/// Loads a scenario from a JSON file, or the built-in preset when `spec` is
/// the literal name `benchmark`.
pub fn load_scenario(spec: &str) -> Result<Scenario> {
    if spec == "benchmark" {
        return Ok(benchmark_scenario());
    }
    let text = fs::read_to_string(spec).map_err(|e| CliError::data(format!("{spec}: {e}")))?;
    let file: ScenarioFile =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{spec}: {e}")))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(CliError::data(format!(
            "{spec}: schema version {} (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    file.scenario
        .validate()
        .map_err(|e| CliError::config(format!("{spec}: {e}")))?;
    Ok(file.scenario)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn load_batch(path: &Path) -> Result<BatchFile> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let file: BatchFile =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(CliError::data(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            file.schema_version
        )));
    }
    if file.scans.len() != file.origins.len()
        || file
            .scans
            .iter()
            .zip(&file.origins)
            .any(|(s, o)| s.len() != o.len())
    {
        return Err(CliError::data(format!(
            "{}: origin labels do not align with scans",
            path.display()
        )));
    }
    Ok(file)
}

/// One row of the per-run results table.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub run: u64,
    pub method: String,
    pub preset: String,
    pub iterations: u64,
    pub init: String,
    pub seed: u64,
    pub total: f64,
    pub localization: f64,
    pub missed: f64,
    pub false_: f64,
    pub switch_: f64,
    pub correct: usize,
    pub best_log_pi: f64,
    pub runtime_s: f64,
    /// Per-move acceptance rates (update, merge, split, switch); zeros for
    /// the Gibbs sampler.
    pub acc_rates: [f64; 4],
}

pub const RESULTS_HEADER: &str = "schema_version,run,method,preset,iterations,init,seed,total,\
localization,missed,false,switch,correct,best_log_pi,runtime_s,acc_update,acc_merge,acc_split,acc_switch";

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{:.6},{:.6},{:.6},{:.6}\n",
            SCHEMA_VERSION,
            r.run,
            r.method,
            r.preset,
            r.iterations,
            r.init,
            r.seed,
            r.total,
            r.localization,
            r.missed,
            r.false_,
            r.switch_,
            r.correct,
            r.best_log_pi,
            r.runtime_s,
            r.acc_rates[0],
            r.acc_rates[1],
            r.acc_rates[2],
            r.acc_rates[3],
        ));
    }
    fs::write(path, out).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: u64,
    pub log_pi: f64,
    pub correct: usize,
}

pub fn write_trace_csv(path: &Path, run: u64, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("schema_version,run,iteration,log_pi,correct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            SCHEMA_VERSION, run, r.iteration, r.log_pi, r.correct
        ));
    }
    fs::write(path, out).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// One estimated or ground-truth trajectory in export form.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub track: u64,
    pub birth: usize,
    /// Per step: position x, position y, velocity x, velocity y.
    pub states: Vec<[f64; 4]>,
}

impl EstimateSet {
    pub fn from_estimate(e: &TrajectoryEstimate) -> Self {
        EstimateSet {
            track: e.slot as u64,
            birth: e.birth,
            states: e
                .states
                .iter()
                .map(|m| [m.mean[0], m.mean[2], m.mean[1], m.mean[3]])
                .collect(),
        }
    }

    pub fn from_truth(index: u64, tr: &TruthTrajectory) -> Self {
        EstimateSet {
            track: index,
            birth: tr.birth,
            states: tr.states.iter().map(|s| [s[0], s[2], s[1], s[3]]).collect(),
        }
    }
}

pub const ESTIMATES_HEADER: &str = "schema_version,run,track,birth,end,scan,px,py,vx,vy";

pub fn write_estimates_csv(path: &Path, run: u64, sets: &[EstimateSet]) -> Result<()> {
    let mut out = String::from(ESTIMATES_HEADER);
    out.push('\n');
    for s in sets {
        let end = s.birth + s.states.len() - 1;
        for (step, st) in s.states.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                SCHEMA_VERSION,
                run,
                s.track,
                s.birth,
                end,
                s.birth + step,
                st[0],
                st[1],
                st[2],
                st[3],
            ));
        }
    }
    fs::write(path, out).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Reads an estimates CSV back into metric tracks, grouped by run.
pub fn read_estimates_csv(path: &Path) -> Result<Vec<(u64, Vec<MetricTrack>)>> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, what: &str| {
        CliError::data(format!("{} line {}: {what}", path.display(), line + 1))
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == ESTIMATES_HEADER => {}
        _ => return Err(CliError::data(format!("{}: not an estimates CSV", path.display()))),
    }
    // (run, track) -> (birth, rows of (scan, px, py))
    let mut groups: std::collections::BTreeMap<(u64, u64), (usize, Vec<(usize, f64, f64)>)> =
        std::collections::BTreeMap::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(ln, "expected 10 fields"));
        }
        let run: u64 = f[1].parse().map_err(|_| bad(ln, "bad run"))?;
        let track: u64 = f[2].parse().map_err(|_| bad(ln, "bad track"))?;
        let birth: usize = f[3].parse().map_err(|_| bad(ln, "bad birth"))?;
        let scan: usize = f[5].parse().map_err(|_| bad(ln, "bad scan"))?;
        let px: f64 = f[6].parse().map_err(|_| bad(ln, "bad px"))?;
        let py: f64 = f[7].parse().map_err(|_| bad(ln, "bad py"))?;
        groups
            .entry((run, track))
            .or_insert_with(|| (birth, Vec::new()))
            .1
            .push((scan, px, py));
    }
    let mut by_run: std::collections::BTreeMap<u64, Vec<MetricTrack>> =
        std::collections::BTreeMap::new();
    for ((run, track), (birth, mut rows)) in groups {
        rows.sort_unstable_by_key(|r| r.0);
        for (i, r) in rows.iter().enumerate() {
            if r.0 != birth + i {
                return Err(CliError::data(format!(
                    "{}: track {track} of run {run} has non-contiguous scans",
                    path.display()
                )));
            }
        }
        by_run.entry(run).or_default().push(MetricTrack {
            birth,
            positions: rows.iter().map(|r| Vector2::new(r.1, r.2)).collect(),
        });
    }
    Ok(by_run.into_iter().collect())
}

/// One row of the evaluation table plus its per-scan curves.
pub struct EvaluationEntry {
    pub label: String,
    pub run: u64,
    pub result: GospaResult,
}

pub fn write_evaluation_csv(path: &Path, entries: &[EvaluationEntry]) -> Result<()> {
    let mut out =
        String::from("schema_version,file,run,total,localization,missed,false,switch\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            SCHEMA_VERSION,
            e.label,
            e.run,
            e.result.total,
            e.result.localization,
            e.result.missed,
            e.result.false_,
            e.result.switch_,
        ));
    }
    fs::write(path, out).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_per_time_csv(path: &Path, entries: &[EvaluationEntry]) -> Result<()> {
    let mut out =
        String::from("schema_version,file,run,scan,localization,missed,false,switch\n");
    for e in entries {
        for (t, s) in e.result.per_time.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                SCHEMA_VERSION,
                e.label,
                e.run,
                t,
                s.localization,
                s.missed,
                s.false_,
                s.switch_,
            ));
        }
    }
    fs::write(path, out).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// One row of the sweep summary table.
pub struct SweepRow {
    pub label: String,
    pub method: String,
    pub preset: String,
    pub iterations: u64,
    pub runs: u64,
    pub mean_total: f64,
    pub sd_total: f64,
    pub mean_localization: f64,
    pub mean_missed: f64,
    pub mean_false: f64,
    pub mean_switch: f64,
    pub mean_runtime_s: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from(
        "schema_version,label,method,preset,iterations,runs,mean_total,sd_total,\
mean_localization,mean_missed,mean_false,mean_switch,mean_runtime_s\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.3}\n",
            SCHEMA_VERSION,
            r.label,
            r.method,
            r.preset,
            r.iterations,
            r.runs,
            r.mean_total,
            r.sd_total,
            r.mean_localization,
            r.mean_missed,
            r.mean_false,
            r.mean_switch,
            r.mean_runtime_s,
        ));
    }
    fs::write(path, out).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Writes an association checkpoint: header lines, then the association's
/// text form (one line of space-separated entries per scan).
pub fn write_theta_checkpoint(
    path: &Path,
    theta_text: &str,
    iterations: u64,
    log_pi: f64,
) -> Result<()> {
    let text = format!(
        "schema_version {SCHEMA_VERSION}\niterations {iterations}\nlog_pi {log_pi}\ntheta\n{theta_text}"
    );
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Parses a checkpoint's header and returns the association body text.
pub fn read_checkpoint_text(path: &Path) -> Result<(String, u64, f64)> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let bad = |what: &str| CliError::data(format!("{}: {what}", path.display()));
    let mut iterations = 0u64;
    let mut log_pi = f64::NAN;
    let mut lines = text.lines();
    let mut saw_version = false;
    for line in lines.by_ref() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("schema_version") => {
                let v: u32 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad("bad schema_version line"))?;
                if v != SCHEMA_VERSION {
                    return Err(bad("unsupported schema version"));
                }
                saw_version = true;
            }
            Some("iterations") => {
                iterations = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad("bad iterations line"))?;
            }
            Some("log_pi") => {
                log_pi = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad("bad log_pi line"))?;
            }
            Some("theta") => break,
            _ => return Err(bad("unrecognized header line")),
        }
    }
    if !saw_version {
        return Err(bad("missing schema_version"));
    }
    let body: String = lines.collect::<Vec<_>>().join("\n");
    Ok((body, iterations, log_pi))
}

/// Reads a checkpoint and validates the association against the batch.
pub fn read_theta_checkpoint(path: &Path, batch: &Batch) -> Result<(Theta, u64, f64)> {
    let (body, iterations, log_pi) = read_checkpoint_text(path)?;
    let theta = Theta::from_text(batch, &body)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok((theta, iterations, log_pi))
}
