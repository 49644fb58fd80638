//! Subcommand drivers shared by the binary and the tests. Every driver writes
//! `metrics.json` and `run_manifest.json` into `config.out`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    flatness_indicator, grad_norm_trace, session_accuracy, FlatnessReport, GradNormTrace, Metrics, QuadraticObjective,
};
use crate::bench::experiment::{
    continue_sessions, derive_seed, prepare, resolve, run_ablation_grid, run_base, run_bound_sweep, run_experiment,
    write_ablation_csv, write_json, write_sessions_csv, write_sweep_csv, Prepared, NOISE_STREAM, PROBE_STREAM,
};
use crate::config::{Manifest, Mode, Problem, RunConfig};
use crate::error::{Error, Result};
use crate::net::init_network;
use crate::train::{BaseObjective, NoiseSampler, RunState};

/// Files written by a driver and a one-line summary for the terminal.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Seed recorded next to a saved state so later commands can rebuild its data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
}

const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn save_checkpoint(dir: &Path, seed: u64, state: &RunState) -> Result<()> {
    state.save(dir)?;
    write_json(&dir.join(CHECKPOINT_FILE), &Checkpoint { seed })
}

pub fn load_checkpoint(dir: &Path) -> Result<(u64, RunState)> {
    let text = std::fs::read(dir.join(CHECKPOINT_FILE))
        .map_err(|e| Error::State(format!("{} is not a checkpoint: {e}", dir.display())))?;
    let checkpoint: Checkpoint = serde_json::from_slice(&text)?;
    Ok((checkpoint.seed, RunState::load(dir)?))
}

struct Writer {
    out: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(command: &str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&config.out)?;
        let mut w = Self {
            out: config.out.clone(),
            files: Vec::new(),
        };
        w.json("run_manifest.json", &Manifest::new(command, config))?;
        Ok(w)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.files.push(p.clone());
        p
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        write_json(&p, value)
    }

    fn finish(self, summary: String) -> Outcome {
        Outcome {
            files: self.files,
            summary,
        }
    }
}

fn state_dir(config: &RunConfig, seed: u64) -> PathBuf {
    if config.seeds.len() == 1 {
        config.out.join("state")
    } else {
        config.out.join(format!("state-{seed}"))
    }
}

#[derive(Serialize)]
struct BaseMetrics {
    seed: u64,
    metrics: Metrics,
    base_losses: Vec<f64>,
    flatness: Vec<FlatnessReport>,
}

/// Trains the base session of every seed and saves each state.
pub fn train_base(config: &RunConfig) -> Result<Outcome> {
    let mut w = Writer::new("train-base", config)?;
    let experiment = experiment_for(config);
    let mut all = Vec::new();
    for &seed in &config.seeds {
        let data = prepare(&experiment, seed)?;
        let stage = run_base(&experiment, &data)?;
        save_checkpoint(&state_dir(config, seed), seed, &stage.state)?;
        let mut metrics = Metrics::from_sessions(vec![stage.accuracy]);
        metrics.grad_norm_trace = stage.grad_norm_trace;
        all.push(BaseMetrics {
            seed,
            metrics,
            base_losses: stage.base_losses,
            flatness: stage.flatness,
        });
    }
    let flatness: Vec<&FlatnessReport> = all.iter().flat_map(|m| &m.flatness).collect();
    w.json("flatness.json", &flatness)?;
    w.json("metrics.json", &all)?;
    let mean = all.iter().map(|m| m.metrics.sessions[0].all).sum::<f64>() / all.len() as f64;
    Ok(w.finish(format!("base accuracy {mean:.4} over {} seed(s)", all.len())))
}

/// Accuracies of a run resumed from a saved state: the state's own session
/// first, then every later one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resumed {
    pub seed: u64,
    pub from_session: usize,
    pub metrics: Metrics,
}

pub fn resume_run(config: &RunConfig, dir: &Path) -> Result<(Resumed, RunState)> {
    let (seed, mut state) = load_checkpoint(dir)?;
    let experiment = experiment_for(config);
    let data = prepare(&experiment, seed)?;
    let base = &data.sessions[0];
    let from_session = state.session;
    let mut accs = vec![session_accuracy(
        &state.params,
        &state.store,
        &data.test,
        &base.classes,
        from_session,
    )?];
    let (more, _) = continue_sessions(&experiment, &data, &mut state)?;
    accs.extend(more);
    Ok((
        Resumed {
            seed,
            from_session,
            metrics: Metrics::from_sessions(accs),
        },
        state,
    ))
}

fn experiment_for(config: &RunConfig) -> crate::bench::ExperimentConfig {
    let experiment = config.experiment();
    if config.mode == Mode::Baseline {
        experiment.baseline()
    } else {
        experiment
    }
}

/// All sessions for every seed, or the remaining sessions of a checkpoint.
pub fn run(config: &RunConfig, resume: Option<&Path>) -> Result<Outcome> {
    let mut w = Writer::new("run", config)?;
    if let Some(dir) = resume {
        let (resumed, state) = resume_run(config, dir)?;
        save_checkpoint(&state_dir(config, resumed.seed), resumed.seed, &state)?;
        w.json("metrics.json", &resumed)?;
        let last = resumed.metrics.sessions.last().map_or(f64::NAN, |s| s.all);
        return Ok(w.finish(format!(
            "resumed seed {} after session {}; final accuracy {last:.4}",
            resumed.seed, resumed.from_session
        )));
    }
    let result = run_experiment(&experiment_for(config))?;
    w.json("metrics.json", &result)?;
    let p = w.path("sessions.csv");
    write_sessions_csv(&p, &result)?;
    let last = result.summary.last().map_or(f64::NAN, |s| s.all.mean);
    let pd = result.pd.as_ref().map_or(f64::NAN, |s| s.mean);
    Ok(w.finish(format!("final accuracy {last:.4}, PD {pd:.2}")))
}

pub fn ablation(config: &RunConfig) -> Result<Outcome> {
    let mut w = Writer::new("ablation", config)?;
    let table = run_ablation_grid(&config.experiment())?;
    w.json("metrics.json", &table)?;
    let p = w.path("ablation.csv");
    write_ablation_csv(&p, &table)?;
    Ok(w.finish(format!(
        "{} ablation rows over {} seed(s)",
        table.rows.len(),
        table.seeds.len()
    )))
}

pub fn sweep(config: &RunConfig) -> Result<Outcome> {
    let mut w = Writer::new("sweep", config)?;
    let rows = run_bound_sweep(&config.experiment(), &config.sweep.bounds)?;
    w.json("metrics.json", &rows)?;
    let p = w.path("sweep.csv");
    write_sweep_csv(&p, &rows)?;
    Ok(w.finish(format!("{} bounds swept", rows.len())))
}

/// Flatness summary without the raw per-draw losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessSummary {
    pub seed: u64,
    pub split: String,
    pub bound: f64,
    pub samples: usize,
    #[serde(rename = "I")]
    pub indicator: f64,
    #[serde(rename = "sigma2")]
    pub variance: f64,
    #[serde(rename = "L_star")]
    pub anchor_loss: f64,
    pub mean_loss: f64,
}

impl FlatnessSummary {
    fn of(seed: u64, r: &FlatnessReport) -> Self {
        Self {
            seed,
            split: r.split.clone(),
            bound: r.bound,
            samples: r.sample_count,
            indicator: r.indicator,
            variance: r.variance,
            anchor_loss: r.anchor_loss,
            mean_loss: r.mean_loss,
        }
    }
}

/// Probes a saved base model, or trains one first when no checkpoint is given.
pub fn flatness(config: &RunConfig) -> Result<Outcome> {
    let mut w = Writer::new("flatness", config)?;
    let experiment = experiment_for(config);
    let mut summaries = Vec::new();
    match &config.flatness.checkpoint {
        Some(dir) => {
            let (seed, state) = load_checkpoint(dir)?;
            let data = prepare(&experiment, seed)?;
            for r in probe_base(config, &data, &state)? {
                summaries.push(FlatnessSummary::of(seed, &r));
            }
        }
        None => {
            if config.flatness.samples == 0 {
                return Err(Error::config("flatness.samples", "must be at least 1"));
            }
            for &seed in &config.seeds {
                let data = prepare(&experiment, seed)?;
                let stage = run_base(&experiment, &data)?;
                summaries.extend(stage.flatness.iter().map(|r| FlatnessSummary::of(seed, r)));
            }
        }
    }
    w.json("flatness.json", &summaries)?;
    w.json("metrics.json", &summaries)?;
    let line = summaries
        .iter()
        .map(|s| format!("{} I={:.3e}", s.split, s.indicator))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(w.finish(line))
}

fn probe_base(config: &RunConfig, data: &Prepared, state: &RunState) -> Result<Vec<FlatnessReport>> {
    if config.flatness.samples == 0 {
        return Err(Error::config("flatness.samples", "must be at least 1"));
    }
    let base = &data.sessions[0];
    let base_test = data.test.filter_classes(&base.classes);
    let probe_seed = derive_seed(data.seed, PROBE_STREAM);
    [("train", &base.train), ("test", &base_test)]
        .into_iter()
        .map(|(split, ds)| {
            flatness_indicator(
                &state.params,
                config.train.noise.bound,
                ds,
                config.flatness.samples,
                probe_seed,
                split,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub problem: Problem,
    pub trace: GradNormTrace,
    pub initial: f64,
    pub last: f64,
    /// Smallest recorded value over the whole run.
    pub min: f64,
}

/// Noise-averaged descent with a decaying step, tracking `‖∇‖²` estimates.
pub fn convergence_trace(config: &RunConfig) -> Result<ConvergenceReport> {
    let c = &config.convergence;
    let seed = config.seeds.first().copied().unwrap_or(0);
    let m = config.train.noise.samples;
    let bound = config.train.noise.bound;
    let trace = match c.problem {
        Problem::Quadratic => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let curvature: Vec<f64> = (0..c.dim).map(|_| rng.random_range(0.5..2.0)).collect();
            let center: Vec<f64> = (0..c.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let objective = QuadraticObjective::new(curvature, center)?;
            let mut theta = vec![0.0; c.dim];
            let mut train = NoiseSampler::new(bound, derive_seed(seed, NOISE_STREAM), vec![true; c.dim])?;
            let mut probe = NoiseSampler::new(bound, derive_seed(seed, PROBE_STREAM), vec![true; c.dim])?;
            grad_norm_trace(
                &objective, &mut theta, &mut train, &mut probe, m, c.alpha0, c.decay, c.steps, c.every,
            )?
        }
        Problem::Base => {
            let experiment = config.experiment();
            let data = prepare(&experiment, seed)?;
            let (network, train_cfg) = resolve(&experiment, &data);
            let params = init_network(&network)?;
            let base = &data.sessions[0].train;
            let (x, labels) = (base.to_tensor()?, base.labels().to_vec());
            let objective = BaseObjective::at(&params, &x, &labels, train_cfg.lambda)?;
            let mut theta = params.values().to_vec();
            let mut train = NoiseSampler::for_params(&train_cfg.noise, &params)?;
            let mut probe = NoiseSampler::new(bound, derive_seed(seed, PROBE_STREAM), params.eligible_mask())?;
            grad_norm_trace(
                &objective, &mut theta, &mut train, &mut probe, m, c.alpha0, c.decay, c.steps, c.every,
            )?
        }
    };
    let initial = trace.initial().unwrap_or(f64::NAN);
    let last = trace.last().unwrap_or(f64::NAN);
    let min = trace.grad_norm_sq.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ConvergenceReport {
        problem: c.problem,
        trace,
        initial,
        last,
        min,
    })
}

pub fn convergence(config: &RunConfig) -> Result<Outcome> {
    let mut w = Writer::new("convergence", config)?;
    let report = convergence_trace(config)?;
    w.json("metrics.json", &report)?;
    let p = w.path("convergence.csv");
    let mut out = csv::Writer::from_path(&p).map_err(csv_error)?;
    out.write_record(["step", "grad_norm_sq"]).map_err(csv_error)?;
    for (k, g) in report.trace.steps.iter().zip(&report.trace.grad_norm_sq) {
        out.write_record([k.to_string(), g.to_string()]).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(w.finish(format!(
        "squared gradient norm {:.3e} -> {:.3e} over {} steps",
        report.initial, report.last, config.convergence.steps
    )))
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::State(format!("csv: {other:?}")),
    }
}

/// Dispatches on `config.mode`.
pub fn run_mode(config: &RunConfig) -> Result<Outcome> {
    match config.mode {
        Mode::F2m | Mode::Baseline => run(config, None),
        Mode::Ablation => ablation(config),
        Mode::Sweep => sweep(config),
        Mode::Flatness => flatness(config),
        Mode::Convergence => convergence(config),
    }
}
