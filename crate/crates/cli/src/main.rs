//! Command line front end. Subcommands: `simulate` samples a scenario into a
//! batch file, `run` executes a sampler over Monte Carlo runs, `evaluate`
//! scores estimate files against a batch's truth, and `sweep` tabulates
//! several sampler configurations on the same data.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use tpmbm_cli::files::{self, BatchFile, CliError, EstimateSet, EvaluationEntry, ResultRow, SweepRow};
use tpmbm_cli::pipeline::{self, InitMode, Method, RunOutput, RunSource, RunSpec};

use tpmbm::metrics::{trajectory_gospa, GospaConfig, MetricTrack};
use tpmbm::mh::MovePreset;
use tpmbm::recursion::Thresholds;
use tpmbm::sim::{generate_measurements, generate_truth};

#[derive(Parser)]
#[command(
    name = "tpmbm",
    version,
    about = "Batch multi-object trajectory estimation with MCMC data association"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a scenario's ground truth and measurements into a batch file
    Simulate(SimulateArgs),
    /// Run a sampler and write results, estimates, traces and checkpoints
    Run(RunArgs),
    /// Score estimate files against a batch's ground truth
    Evaluate(EvaluateArgs),
    /// Run several sampler configurations on the same data and tabulate them
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gibbs,
    Mh,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    High,
    Medium,
    Low,
}

impl PresetArg {
    fn preset(self) -> MovePreset {
        match self {
            PresetArg::High => MovePreset::High,
            PresetArg::Medium => MovePreset::Medium,
            PresetArg::Low => MovePreset::Low,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PresetArg::High => "high",
            PresetArg::Medium => "medium",
            PresetArg::Low => "low",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    /// Deterministic pass assigning each block its best value
    Greedy,
    /// Every measurement starts its own track
    Singletons,
    /// Load the association from a checkpoint file
    Checkpoint,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Prune undetected-intensity components below this weight
    #[arg(long, default_value_t = 1e-4)]
    poisson_prune: f64,
    /// Prune birth-time components below this probability at track creation
    #[arg(long, default_value_t = 1e-2)]
    birth_pmf: f64,
    /// Prune end-time components below this probability after prediction
    #[arg(long, default_value_t = 1e-4)]
    end_pmf: f64,
    /// Treat new tracks with existence below this as clutter
    #[arg(long, default_value_t = 1e-2)]
    existence_clamp: f64,
}

impl ThresholdArgs {
    fn build(&self) -> Result<Thresholds, CliError> {
        for (name, v) in [
            ("poisson-prune", self.poisson_prune),
            ("birth-pmf", self.birth_pmf),
            ("end-pmf", self.end_pmf),
            ("existence-clamp", self.existence_clamp),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(CliError::config(format!("--{name} {v} not in [0, 1)")));
            }
        }
        Ok(Thresholds {
            poisson_prune: self.poisson_prune,
            birth_pmf: self.birth_pmf,
            end_pmf: self.end_pmf,
            existence_clamp: self.existence_clamp,
        })
    }
}

#[derive(Args)]
struct GospaArgs {
    /// Metric order
    #[arg(long, default_value_t = 1.0)]
    gospa_p: f64,
    /// Localization cutoff distance
    #[arg(long, default_value_t = 10.0)]
    gospa_c: f64,
    /// Track switch penalty
    #[arg(long, default_value_t = 2.0)]
    gospa_gamma: f64,
}

impl GospaArgs {
    fn build(&self) -> Result<GospaConfig, CliError> {
        GospaConfig::new(self.gospa_p, self.gospa_c, self.gospa_gamma)
            .map_err(|e| CliError::config(e.to_string()))
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON path, or "benchmark" for the built-in preset
    #[arg(long)]
    scenario: String,
    /// Override the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, env = "TPMBM_OUT", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON path or "benchmark"; fresh measurements per run
    #[arg(long, conflicts_with = "batch")]
    scenario: Option<String>,
    /// Batch JSON path; every run reuses its measurements
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Sweeps for gibbs, proposal steps for mh
    #[arg(long)]
    iterations: u64,
    /// Move-probability preset (mh)
    #[arg(long, value_enum, default_value = "high")]
    preset: PresetArg,
    /// Explicit move probabilities "update,merge,split,switch" (mh only)
    #[arg(long)]
    move_probs: Option<String>,
    #[arg(long, value_enum, default_value = "greedy")]
    init: InitArg,
    /// Checkpoint file for --init checkpoint
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Override the scenario's gating probability
    #[arg(long)]
    gate_prob: Option<f64>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// Root sampler seed; run r uses generator stream r
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of Monte Carlo runs
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    /// Concurrent runs
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Trace interval in iterations; 0 disables the trace file
    #[arg(long, default_value_t = 0)]
    trace_every: u64,
    /// Weight cache capacity per chain
    #[arg(long, default_value_t = 1 << 18)]
    cache_cap: usize,
    #[command(flatten)]
    gospa: GospaArgs,
    /// Output directory
    #[arg(long, env = "TPMBM_OUT", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Batch JSON file providing the ground truth
    #[arg(long)]
    batch: PathBuf,
    /// Estimates CSV files to score
    #[arg(long, required = true, num_args = 1..)]
    estimates: Vec<PathBuf>,
    #[command(flatten)]
    gospa: GospaArgs,
    /// Output directory
    #[arg(long, env = "TPMBM_OUT", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario JSON path or "benchmark"; fresh measurements per run
    #[arg(long, conflicts_with = "batch")]
    scenario: Option<String>,
    /// Batch JSON path; every run reuses its measurements
    #[arg(long)]
    batch: Option<PathBuf>,
    /// Sweep entry "label=method:preset:iterations" (preset "-" for gibbs);
    /// repeatable. Defaults to the three mh presets at 200000 steps plus
    /// gibbs at 1000 sweeps.
    #[arg(long = "entry")]
    entries: Vec<String>,
    #[arg(long, value_enum, default_value = "greedy")]
    init: InitArg,
    /// Checkpoint file for --init checkpoint
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Override the scenario's gating probability
    #[arg(long)]
    gate_prob: Option<f64>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Weight cache capacity per chain
    #[arg(long, default_value_t = 1 << 18)]
    cache_cap: usize,
    #[command(flatten)]
    gospa: GospaArgs,
    /// Output directory
    #[arg(long, env = "TPMBM_OUT", default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))
}

fn parse_move_probs(text: &str) -> Result<[f64; 4], CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(CliError::config(format!(
            "--move-probs needs 4 comma-separated values, got {}",
            parts.len()
        )));
    }
    let mut probs = [0.0; 4];
    for (slot, part) in probs.iter_mut().zip(&parts) {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("--move-probs: bad value {part:?}")))?;
        if !(v >= 0.0) {
            return Err(CliError::config(format!("--move-probs: negative value {v}")));
        }
        *slot = v;
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CliError::config(format!(
            "--move-probs must sum to 1, got {sum}"
        )));
    }
    Ok(probs)
}

fn check_gate_prob(gate: Option<f64>) -> Result<(), CliError> {
    if let Some(g) = gate {
        if !(0.0 < g && g < 1.0) {
            return Err(CliError::config(format!("--gate-prob {g} not in (0, 1)")));
        }
    }
    Ok(())
}

fn load_source(
    scenario: &Option<String>,
    batch: &Option<PathBuf>,
    gate_override: Option<f64>,
) -> Result<RunSource, CliError> {
    check_gate_prob(gate_override)?;
    match (scenario, batch) {
        (Some(spec), None) => {
            let mut sc = files::load_scenario(spec)?;
            if let Some(g) = gate_override {
                sc.model.gate_prob = Some(g);
            }
            Ok(RunSource::Sampled(sc))
        }
        (None, Some(path)) => {
            let bf = files::load_batch(path)?;
            let mut sc = bf.scenario.clone();
            if let Some(g) = gate_override {
                sc.model.gate_prob = Some(g);
            }
            sc.validate().map_err(|e| CliError::config(e.to_string()))?;
            let truth = bf.truth_trajectories();
            let labelled = bf.labelled();
            Ok(RunSource::Fixed {
                scenario: sc,
                truth,
                batch: labelled,
            })
        }
        _ => Err(CliError::config(
            "give exactly one of --scenario or --batch",
        )),
    }
}

fn build_init(init: InitArg, checkpoint: &Option<PathBuf>) -> Result<InitMode, CliError> {
    match init {
        InitArg::Greedy => Ok(InitMode::Greedy),
        InitArg::Singletons => Ok(InitMode::Singletons),
        InitArg::Checkpoint => {
            let path = checkpoint.as_ref().ok_or_else(|| {
                CliError::config("--init checkpoint requires --init-checkpoint <file>")
            })?;
            let (body, _, _) = files::read_checkpoint_text(path)?;
            Ok(InitMode::Checkpoint(body))
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut scenario = files::load_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    scenario
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    let mut rng = ChaCha12Rng::seed_from_u64(scenario.seed);
    let truth = generate_truth(&scenario, &mut rng)?;
    let mut rng = ChaCha12Rng::seed_from_u64(scenario.seed);
    rng.set_stream(1);
    let batch = generate_measurements(&truth, &scenario, &mut rng)?;

    ensure_out_dir(&a.out)?;
    let scenario_path = a.out.join("scenario.json");
    files::save_json(
        &scenario_path,
        &files::ScenarioFile {
            schema_version: tpmbm::SCHEMA_VERSION,
            scenario: scenario.clone(),
        },
    )?;
    let batch_path = a.out.join("batch.json");
    files::save_json(&batch_path, &BatchFile::from_parts(&scenario, 1, &truth, &batch))?;

    let total: usize = batch.scans.iter().map(Vec::len).sum();
    let detections: usize = batch
        .origins
        .iter()
        .flatten()
        .filter(|o| o.is_some())
        .count();
    println!(
        "simulated {} objects over {} scans: {} measurements ({} detections, {} clutter)",
        truth.len(),
        scenario.horizon,
        total,
        detections,
        total - detections
    );
    println!("wrote {}", scenario_path.display());
    println!("wrote {}", batch_path.display());
    Ok(())
}

fn result_row(out: &RunOutput, spec: &RunSpec, seed: u64) -> ResultRow {
    ResultRow {
        run: out.run,
        method: spec.method.name().to_string(),
        preset: spec.preset_label.clone(),
        iterations: spec.iterations,
        init: spec.init.name().to_string(),
        seed,
        total: out.gospa.total,
        localization: out.gospa.localization,
        missed: out.gospa.missed,
        false_: out.gospa.false_,
        switch_: out.gospa.switch_,
        correct: out.correct,
        best_log_pi: out.best_log_pi,
        runtime_s: out.runtime_s,
        acc_rates: out.acc_rates,
    }
}

fn write_run_outputs(
    out_dir: &Path,
    spec: &RunSpec,
    seed: u64,
    outputs: &[RunOutput],
) -> Result<(), CliError> {
    let rows: Vec<ResultRow> = outputs.iter().map(|o| result_row(o, spec, seed)).collect();
    files::write_results_csv(&out_dir.join("results.csv"), &rows)?;
    for o in outputs {
        let sets: Vec<EstimateSet> = o.estimates.iter().map(EstimateSet::from_estimate).collect();
        files::write_estimates_csv(&out_dir.join(format!("estimates-run{}.csv", o.run)), o.run, &sets)?;
        files::write_theta_checkpoint(
            &out_dir.join(format!("theta-run{}.txt", o.run)),
            &o.best_theta_text,
            o.best_iteration,
            o.best_log_pi,
        )?;
        if spec.trace_every > 0 {
            files::write_trace_csv(&out_dir.join(format!("trace-run{}.csv", o.run)), o.run, &o.trace)?;
        }
    }
    Ok(())
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let thresholds = a.thresholds.build()?;
    let gospa = a.gospa.build()?;
    if a.move_probs.is_some() && matches!(a.method, MethodArg::Gibbs) {
        return Err(CliError::config("--move-probs applies to --method mh"));
    }
    let (probs, preset_label) = match (&a.move_probs, a.method) {
        (_, MethodArg::Gibbs) => ([0.0; 4], "-".to_string()),
        (Some(text), MethodArg::Mh) => (parse_move_probs(text)?, "custom".to_string()),
        (None, MethodArg::Mh) => (a.preset.preset().probs(), a.preset.name().to_string()),
    };
    let init = build_init(a.init, &a.init_checkpoint)?;
    let source = load_source(&a.scenario, &a.batch, a.gate_prob)?;
    let spec = RunSpec {
        method: match a.method {
            MethodArg::Gibbs => Method::Gibbs,
            MethodArg::Mh => Method::Mh,
        },
        iterations: a.iterations,
        probs,
        preset_label,
        init,
        trace_every: a.trace_every,
        cache_cap: a.cache_cap,
        gospa,
    };
    ensure_out_dir(&a.out)?;

    let outputs = pipeline::monte_carlo(&source, &spec, thresholds, a.seed, a.runs, a.workers)?;
    write_run_outputs(&a.out, &spec, a.seed, &outputs)?;

    for o in &outputs {
        println!(
            "run {}: distance {:.1} (loc {:.1} miss {:.1} false {:.1} switch {:.1}) \
correct {}/{} tracks {} runtime {:.1}s",
            o.run,
            o.gospa.total,
            o.gospa.localization,
            o.gospa.missed,
            o.gospa.false_,
            o.gospa.switch_,
            o.correct,
            o.total_detections,
            o.estimates.len(),
            o.runtime_s
        );
    }
    let (mean, sd) = mean_sd(outputs.iter().map(|o| o.gospa.total));
    let (rt_mean, _) = mean_sd(outputs.iter().map(|o| o.runtime_s));
    println!(
        "{} {} x{}: mean distance {:.1} (sd {:.1}), mean runtime {:.1}s",
        spec.method.name(),
        spec.iterations,
        outputs.len(),
        mean,
        sd,
        rt_mean
    );
    println!("wrote {}", a.out.join("results.csv").display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let gospa = a.gospa.build()?;
    let bf = files::load_batch(&a.batch)?;
    let truth: Vec<MetricTrack> = bf
        .truth_trajectories()
        .iter()
        .map(|t| t.metric_track())
        .collect();
    let mut entries: Vec<EvaluationEntry> = Vec::new();
    for path in &a.estimates {
        let label = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        for (run, tracks) in files::read_estimates_csv(path)? {
            let result = trajectory_gospa(&truth, &tracks, &gospa)?;
            entries.push(EvaluationEntry { label: label.clone(), run, result });
        }
    }
    ensure_out_dir(&a.out)?;
    files::write_evaluation_csv(&a.out.join("evaluation.csv"), &entries)?;
    files::write_per_time_csv(&a.out.join("evaluation_per_time.csv"), &entries)?;
    for e in &entries {
        println!(
            "{} run {}: distance {:.4} (loc {:.4} miss {:.4} false {:.4} switch {:.4})",
            e.label, e.run, e.result.total, e.result.localization, e.result.missed,
            e.result.false_, e.result.switch_
        );
    }
    println!("wrote {}", a.out.join("evaluation.csv").display());
    Ok(())
}

struct SweepEntry {
    label: String,
    method: Method,
    preset_label: String,
    probs: [f64; 4],
    iterations: u64,
}

fn parse_sweep_entry(text: &str) -> Result<SweepEntry, CliError> {
    let bad = || CliError::config(format!(
        "--entry {text:?}: expected label=method:preset:iterations"
    ));
    let (label, rest) = text.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = rest.split(':').collect();
    if parts.len() != 3 || label.is_empty() {
        return Err(bad());
    }
    let iterations: u64 = parts[2].parse().map_err(|_| bad())?;
    match parts[0] {
        "gibbs" => {
            if parts[1] != "-" {
                return Err(CliError::config(format!(
                    "--entry {text:?}: gibbs takes preset \"-\""
                )));
            }
            Ok(SweepEntry {
                label: label.to_string(),
                method: Method::Gibbs,
                preset_label: "-".to_string(),
                probs: [0.0; 4],
                iterations,
            })
        }
        "mh" => {
            let preset = match parts[1] {
                "high" => MovePreset::High,
                "medium" => MovePreset::Medium,
                "low" => MovePreset::Low,
                other => {
                    return Err(CliError::config(format!(
                        "--entry {text:?}: unknown preset {other:?}"
                    )))
                }
            };
            Ok(SweepEntry {
                label: label.to_string(),
                method: Method::Mh,
                preset_label: parts[1].to_string(),
                probs: preset.probs(),
                iterations,
            })
        }
        other => Err(CliError::config(format!(
            "--entry {text:?}: unknown method {other:?}"
        ))),
    }
}

fn default_sweep_entries() -> Vec<SweepEntry> {
    [
        "mh-high=mh:high:200000",
        "mh-medium=mh:medium:200000",
        "mh-low=mh:low:200000",
        "gibbs=gibbs:-:1000",
    ]
    .iter()
    .map(|t| parse_sweep_entry(t).expect("default entries parse"))
    .collect()
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let thresholds = a.thresholds.build()?;
    let gospa = a.gospa.build()?;
    let entries = if a.entries.is_empty() {
        default_sweep_entries()
    } else {
        a.entries
            .iter()
            .map(|t| parse_sweep_entry(t))
            .collect::<Result<Vec<_>, _>>()?
    };
    let init = build_init(a.init, &a.init_checkpoint)?;
    let source = load_source(&a.scenario, &a.batch, a.gate_prob)?;
    ensure_out_dir(&a.out)?;

    let mut table: Vec<SweepRow> = Vec::new();
    for entry in &entries {
        let spec = RunSpec {
            method: entry.method,
            iterations: entry.iterations,
            probs: entry.probs,
            preset_label: entry.preset_label.clone(),
            init: init.clone(),
            trace_every: 0,
            cache_cap: a.cache_cap,
            gospa,
        };
        let outputs =
            pipeline::monte_carlo(&source, &spec, thresholds, a.seed, a.runs, a.workers)?;
        let rows: Vec<ResultRow> = outputs.iter().map(|o| result_row(o, &spec, a.seed)).collect();
        files::write_results_csv(&a.out.join(format!("results-{}.csv", entry.label)), &rows)?;
        let (mean_total, sd_total) = mean_sd(outputs.iter().map(|o| o.gospa.total));
        let (mean_loc, _) = mean_sd(outputs.iter().map(|o| o.gospa.localization));
        let (mean_missed, _) = mean_sd(outputs.iter().map(|o| o.gospa.missed));
        let (mean_false, _) = mean_sd(outputs.iter().map(|o| o.gospa.false_));
        let (mean_switch, _) = mean_sd(outputs.iter().map(|o| o.gospa.switch_));
        let (mean_rt, _) = mean_sd(outputs.iter().map(|o| o.runtime_s));
        println!(
            "{}: mean distance {:.1} (sd {:.1}), mean runtime {:.1}s over {} runs",
            entry.label, mean_total, sd_total, mean_rt, outputs.len()
        );
        table.push(SweepRow {
            label: entry.label.clone(),
            method: entry.method.name().to_string(),
            preset: entry.preset_label.clone(),
            iterations: entry.iterations,
            runs: a.runs,
            mean_total,
            sd_total,
            mean_localization: mean_loc,
            mean_missed,
            mean_false,
            mean_switch,
            mean_runtime_s: mean_rt,
        });
    }
    files::write_sweep_csv(&a.out.join("sweep.csv"), &table)?;
    println!("wrote {}", a.out.join("sweep.csv").display());
    Ok(())
}
