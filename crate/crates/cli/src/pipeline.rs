//! Monte Carlo run orchestration: build a problem per run, initialize the
//! association, run the chosen sampler, extract smoothed trajectories, and
//! score them against the truth.
//!
//! Randomness is split into independent generator streams of a single seeded
//! generator family: truth sampling uses stream 0 of the scenario seed,
//! measurement generation for run r uses stream r + 1 of the scenario seed,
//! and the sampler for run r uses stream r of the root sampler seed. Outputs
//! are therefore bit-reproducible for a fixed configuration regardless of
//! worker scheduling.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use tpmbm::assoc::Theta;
use tpmbm::estimator::{extract, TrajectoryEstimate};
use tpmbm::gibbs::{greedy_init, Gibbs};
use tpmbm::metrics::{
    correct_groupings, trajectory_gospa, GospaConfig, GospaResult, MetricTrack,
};
use tpmbm::mh::Mh;
use tpmbm::recursion::{Problem, Thresholds};
use tpmbm::sim::{generate_measurements, generate_truth, LabelledBatch, Scenario, TruthTrajectory};
use tpmbm::store::SampleStore;
use tpmbm::types::MeasKey;

use crate::files::{CliError, Result, TraceRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gibbs,
    Mh,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gibbs => "gibbs",
            Method::Mh => "mh",
        }
    }
}

#[derive(Debug, Clone)]
pub enum InitMode {
    /// One deterministic pass assigning each block its highest-scoring value.
    Greedy,
    /// Every measurement starts its own track.
    Singletons,
    /// A checkpointed association, serialized as text rows.
    Checkpoint(String),
}

impl InitMode {
    pub fn name(&self) -> &'static str {
        match self {
            InitMode::Greedy => "greedy",
            InitMode::Singletons => "singletons",
            InitMode::Checkpoint(_) => "checkpoint",
        }
    }
}

/// Everything a single run needs besides the data and the seed.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub method: Method,
    /// Sweeps for Gibbs, proposal steps for Metropolis-Hastings.
    pub iterations: u64,
    /// Move probabilities (update, merge, split, switch); ignored by Gibbs.
    pub probs: [f64; 4],
    pub preset_label: String,
    pub init: InitMode,
    /// Trace interval in iterations; 0 disables tracing.
    pub trace_every: u64,
    pub cache_cap: usize,
    pub gospa: GospaConfig,
}

/// Everything one run produced.
pub struct RunOutput {
    pub run: u64,
    pub estimates: Vec<TrajectoryEstimate>,
    pub gospa: GospaResult,
    pub correct: usize,
    pub total_detections: usize,
    pub trace: Vec<TraceRow>,
    pub runtime_s: f64,
    pub best_log_pi: f64,
    pub best_iteration: u64,
    pub acc_rates: [f64; 4],
    /// Checkpoint body of the best association visited.
    pub best_theta_text: String,
}

fn confirmed_histories(theta: &Theta) -> Vec<Vec<MeasKey>> {
    theta
        .confirmed_slots()
        .iter()
        .map(|&s| theta.history(s).to_vec())
        .collect()
}

/// Runs one sampler chain on one problem and scores the best association.
pub fn execute(
    problem: &Problem,
    truth: &[MetricTrack],
    origins: &[Vec<Option<MeasKey>>],
    spec: &RunSpec,
    sampler_seed: u64,
    stream: u64,
    run: u64,
) -> Result<RunOutput> {
    let theta0 = match &spec.init {
        InitMode::Greedy => greedy_init(problem),
        InitMode::Singletons => Theta::all_singletons(&problem.batch),
        InitMode::Checkpoint(text) => Theta::from_text(&problem.batch, text)
            .map_err(|e| CliError::data(format!("checkpoint association: {e}")))?,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(sampler_seed);
    rng.set_stream(stream);

    let mut store = SampleStore::new();
    let mut trace: Vec<TraceRow> = Vec::new();
    let trace_every = spec.trace_every;
    let push_trace = |trace: &mut Vec<TraceRow>, iteration: u64, theta: &Theta, log_pi: f64| {
        trace.push(TraceRow {
            iteration,
            log_pi,
            correct: correct_groupings(origins, &confirmed_histories(theta)),
        });
    };

    let start = Instant::now();
    let acc_rates = match spec.method {
        Method::Gibbs => {
            let mut sampler = Gibbs::new(problem, theta0, spec.cache_cap);
            store.record(&sampler.theta, sampler.log_pi);
            if trace_every > 0 {
                push_trace(&mut trace, 0, &sampler.theta, sampler.log_pi);
            }
            let observe = |it: u64, theta: &Theta, log_pi: f64| {
                if trace_every > 0 && (it + 1) % trace_every == 0 {
                    push_trace(&mut trace, it + 1, theta, log_pi);
                }
            };
            sampler.run(spec.iterations, &mut rng, &mut store, observe);
            [0.0; 4]
        }
        Method::Mh => {
            let mut sampler = Mh::with_probs(problem, theta0, spec.probs, spec.cache_cap);
            store.record(&sampler.theta, sampler.log_pi);
            if trace_every > 0 {
                push_trace(&mut trace, 0, &sampler.theta, sampler.log_pi);
            }
            let observe = |it: u64, theta: &Theta, log_pi: f64| {
                if trace_every > 0 && (it + 1) % trace_every == 0 {
                    push_trace(&mut trace, it + 1, theta, log_pi);
                }
            };
            sampler.run(spec.iterations, &mut rng, &mut store, observe);
            let mut rates = [0.0; 4];
            for c in 0..4 {
                if sampler.stats.proposed[c] > 0 {
                    rates[c] = sampler.stats.accepted[c] as f64 / sampler.stats.proposed[c] as f64;
                }
            }
            rates
        }
    };
    let runtime_s = start.elapsed().as_secs_f64();

    let best = store.best().ok_or(CliError::Data("no samples recorded".into()))?;
    let estimates = extract(problem, &best.theta)?;
    let est_tracks: Vec<MetricTrack> = estimates.iter().map(MetricTrack::from_estimate).collect();
    let gospa = trajectory_gospa(truth, &est_tracks, &spec.gospa)?;
    let correct = correct_groupings(origins, &confirmed_histories(&best.theta));
    let total_detections = origins.iter().flatten().filter(|o| o.is_some()).count();

    Ok(RunOutput {
        run,
        gospa,
        correct,
        total_detections,
        trace,
        runtime_s,
        best_log_pi: best.log_pi,
        best_iteration: best.first_seen,
        acc_rates,
        best_theta_text: best.theta.to_text(),
        estimates,
    })
}

/// Where a Monte Carlo batch of runs gets its measurements.
pub enum RunSource {
    /// Sample fresh measurements per run from the scenario (truth is sampled
    /// once, from stream 0 of the scenario seed).
    Sampled(Scenario),
    /// Every run reuses one fixed batch; only the sampler seed varies.
    Fixed {
        scenario: Scenario,
        truth: Vec<TruthTrajectory>,
        batch: LabelledBatch,
    },
}

impl RunSource {
    pub fn scenario(&self) -> &Scenario {
        match self {
            RunSource::Sampled(s) => s,
            RunSource::Fixed { scenario, .. } => scenario,
        }
    }
}

/// Runs `runs` independent chains, up to `workers` at a time. Outputs come
/// back ordered by run index.
pub fn monte_carlo(
    source: &RunSource,
    spec: &RunSpec,
    thresholds: Thresholds,
    sampler_seed: u64,
    runs: u64,
    workers: usize,
) -> Result<Vec<RunOutput>> {
    let scenario = source.scenario();
    scenario
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    let truth: Vec<TruthTrajectory> = match source {
        RunSource::Fixed { truth, .. } => truth.clone(),
        RunSource::Sampled(s) => {
            let mut rng = ChaCha12Rng::seed_from_u64(s.seed);
            generate_truth(s, &mut rng)?
        }
    };
    let truth_metric: Vec<MetricTrack> = truth.iter().map(|t| t.metric_track()).collect();
    // Surface parameter problems once, before any worker starts.
    scenario
        .params(thresholds)
        .map_err(|e| CliError::config(e.to_string()))?;

    let one_run = |r: u64| -> Result<RunOutput> {
        let labelled = match source {
            RunSource::Fixed { batch, .. } => batch.clone(),
            RunSource::Sampled(s) => {
                let mut rng = ChaCha12Rng::seed_from_u64(s.seed);
                rng.set_stream(r + 1);
                generate_measurements(&truth, s, &mut rng)?
            }
        };
        let origins = labelled.track_origins(&truth);
        let params = scenario
            .params(thresholds)
            .map_err(|e| CliError::config(e.to_string()))?;
        let problem = Problem::new(params, labelled.batch()?)?;
        execute(
            &problem,
            &truth_metric,
            &origins,
            spec,
            sampler_seed,
            r,
            r,
        )
    };

    let workers = workers.max(1).min(runs.max(1) as usize);
    if workers == 1 {
        return (0..runs).map(one_run).collect();
    }
    let next = AtomicU64::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutput>>>> =
        Mutex::new((0..runs).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= runs {
                    break;
                }
                let out = one_run(r);
                slots.lock().unwrap()[r as usize] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every run index visited"))
        .collect()
}
