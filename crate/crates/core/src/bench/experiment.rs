use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    flatness_indicator, noisy_grad_norm_sq, session_accuracy, FlatnessReport, Metrics, SessionAccuracy,
};
use crate::bench::csvio::load_csv;
use crate::bench::synth::{gen_synthetic, split_sessions, SyntheticSpec};
use crate::data::{Dataset, SessionSpec};
use crate::error::{Error, Result};
use crate::net::{init_network, NetworkConfig};
use crate::train::{
    incremental_session, train_base_with, Ablation, BaseObjective, NoiseSampler, RunState, SessionTrace, TrainConfig,
};

/// Where the data comes from and how it is cut into sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// CSV training file; the synthetic generator is used when absent.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub way: usize,
    pub shot: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            train_csv: None,
            test_csv: None,
            way: 2,
            shot: 5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        if self.train_csv.is_some() != self.test_csv.is_some() {
            return Err(Error::config("test_csv", "train_csv and test_csv go together"));
        }
        if self.way == 0 {
            return Err(Error::config("way", "must be at least 1"));
        }
        if self.shot == 0 {
            return Err(Error::config("shot", "must be at least 1"));
        }
        Ok(())
    }

    /// Train and test sets for one run seed.
    pub fn load(&self, data_seed: u64) -> Result<(Dataset, Dataset)> {
        match (&self.train_csv, &self.test_csv) {
            (Some(train), Some(test)) => Ok((load_csv(train)?, load_csv(test)?)),
            _ => gen_synthetic(&SyntheticSpec {
                seed: data_seed,
                ..self.synthetic.clone()
            }),
        }
    }
}

/// One experiment: model, training, data and seeds.
///
/// The seed fields inside `network`, `train` and `data.synthetic` are
/// replaced per run by values derived from each entry of `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    /// Perturbations per flatness probe; zero skips the probe.
    pub flatness_samples: usize,
    /// Only the base session is trained when false.
    pub incremental: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            seeds: vec![0],
            flatness_samples: 1000,
            incremental: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// The intransigent baseline: plain SGD on the base session and no
    /// adaptation afterwards.
    pub fn baseline(&self) -> Self {
        let mut out = self.clone();
        out.train.flags = Ablation::NONE;
        out.train.incremental_epochs = 0;
        out
    }

    pub fn with_flags(&self, flags: Ablation) -> Self {
        let mut out = self.clone();
        out.train.flags = flags;
        out
    }

    pub fn with_bound(&self, bound: f64) -> Self {
        let mut out = self.clone();
        out.train.noise.bound = bound;
        out
    }
}

/// Independent stream `tag` of a run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const DATA_STREAM: u64 = 1;
pub const SPLIT_STREAM: u64 = 2;
pub const INIT_STREAM: u64 = 3;
pub const SHUFFLE_STREAM: u64 = 4;
pub const NOISE_STREAM: u64 = 5;
pub const PROBE_STREAM: u64 = 6;

/// Data and sessions of one seed, shared by every configuration run on it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub sessions: Vec<SessionSpec>,
    pub test: Dataset,
}

pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = config.data.load(derive_seed(seed, DATA_STREAM))?;
    let sessions = split_sessions(
        &train,
        config.data.synthetic.base_classes,
        config.data.way,
        config.data.shot,
        derive_seed(seed, SPLIT_STREAM),
    )?;
    Ok(Prepared { seed, sessions, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub flags: Ablation,
    pub metrics: Metrics,
    /// Base-solution flatness on the base training data and on base-class
    /// test data, in that order. Empty when probing is off.
    pub flatness: Vec<FlatnessReport>,
    pub traces: Vec<SessionTrace>,
    pub base_losses: Vec<f64>,
}

impl RunResult {
    pub fn flatness_on(&self, split: &str) -> Option<&FlatnessReport> {
        self.flatness.iter().find(|r| r.split == split)
    }
}

/// Network and training settings of one seed, with derived seeds filled in.
pub fn resolve(config: &ExperimentConfig, data: &Prepared) -> (NetworkConfig, TrainConfig) {
    let seed = data.seed;
    let feature_dim = data.sessions[0].train.dim();
    let class_count = data
        .test
        .labels()
        .iter()
        .chain(data.sessions.iter().flat_map(|s| s.train.labels()))
        .max()
        .map_or(0, |m| m + 1);
    let network = NetworkConfig {
        input_dim: feature_dim,
        class_count: config.network.class_count.max(class_count),
        seed: derive_seed(seed, INIT_STREAM),
        ..config.network.clone()
    };
    let mut train = config.train.clone();
    train.seed = derive_seed(seed, SHUFFLE_STREAM);
    train.noise.seed = derive_seed(seed, NOISE_STREAM);
    (network, train)
}

/// Everything produced by the base session of one seed.
#[derive(Clone, Debug)]
pub struct BaseStage {
    pub state: RunState,
    pub accuracy: SessionAccuracy,
    pub flatness: Vec<FlatnessReport>,
    pub grad_norm_trace: Vec<f64>,
    pub base_losses: Vec<f64>,
}

/// Base training, the per-epoch gradient-norm trace and the flatness probes.
pub fn run_base(config: &ExperimentConfig, data: &Prepared) -> Result<BaseStage> {
    config.validate()?;
    let seed = data.seed;
    let base = &data.sessions[0];
    let (network, train) = resolve(config, data);

    let params = init_network(&network)?;
    let (x, labels) = (base.train.to_tensor()?, base.train.labels().to_vec());
    let (m, lambda) = train.effective_base();
    let mut probe = NoiseSampler::new(
        train.noise.bound,
        derive_seed(seed, PROBE_STREAM),
        params.eligible_mask(),
    )?;
    let mut grad_trace = Vec::with_capacity(train.base_epochs);
    let mut trace_err = None;
    let outcome = train_base_with(params, &base.train, &train, |_, p| {
        if trace_err.is_some() {
            return;
        }
        let norm = BaseObjective::at(p, &x, &labels, lambda)
            .and_then(|obj| noisy_grad_norm_sq(&obj, p.values(), &mut probe, m));
        match norm {
            Ok(v) => grad_trace.push(v),
            Err(e) => trace_err = Some(e),
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e);
    }

    let mut flatness = Vec::new();
    if config.flatness_samples > 0 {
        let probe_seed = derive_seed(seed, PROBE_STREAM);
        let base_test = data.test.filter_classes(&base.classes);
        for (split, ds) in [("train", &base.train), ("test", &base_test)] {
            flatness.push(flatness_indicator(
                &outcome.params,
                train.noise.bound,
                ds,
                config.flatness_samples,
                probe_seed,
                split,
            )?);
        }
    }

    let base_losses = outcome.epoch_losses.clone();
    let state = RunState::from_base(outcome, train.exemplars_per_class);
    let accuracy = session_accuracy(&state.params, &state.store, &data.test, &base.classes, base.index)?;
    Ok(BaseStage {
        state,
        accuracy,
        flatness,
        grad_norm_trace: grad_trace,
        base_losses,
    })
}

/// Runs every session after `state.session`, returning the accuracy after
/// each of them together with the training traces.
pub fn continue_sessions(
    config: &ExperimentConfig,
    data: &Prepared,
    state: &mut RunState,
) -> Result<(Vec<SessionAccuracy>, Vec<SessionTrace>)> {
    let (_, train) = resolve(config, data);
    let base_classes = &data.sessions[0].classes;
    let mut accs = Vec::new();
    let mut traces = Vec::new();
    let done = state.session;
    for session in data.sessions.iter().filter(|s| s.index > done) {
        traces.push(incremental_session(state, session, &train)?);
        accs.push(session_accuracy(
            &state.params,
            &state.store,
            &data.test,
            base_classes,
            session.index,
        )?);
    }
    Ok((accs, traces))
}

/// Runs the full pipeline for one seed on prepared data, returning the final
/// state as well.
pub fn run_prepared(config: &ExperimentConfig, data: &Prepared) -> Result<(RunResult, RunState)> {
    let stage = run_base(config, data)?;
    let mut state = stage.state;
    let mut accs = vec![stage.accuracy];
    let mut traces = Vec::new();
    if config.incremental {
        let (more, t) = continue_sessions(config, data, &mut state)?;
        accs.extend(more);
        traces = t;
    }
    let mut metrics = Metrics::from_sessions(accs);
    metrics.grad_norm_trace = stage.grad_norm_trace;
    Ok((
        RunResult {
            seed: data.seed,
            flags: config.train.flags,
            metrics,
            flatness: stage.flatness,
            traces,
            base_losses: stage.base_losses,
        },
        state,
    ))
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let data = prepare(config, seed)?;
    Ok(run_prepared(config, &data)?.0)
}

fn map_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

/// Mean and spread of one quantity across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub all: Spread,
    pub base: Spread,
    pub new: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SessionSummary>,
    pub pd: Option<Spread>,
}

impl ExperimentResult {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let sessions = runs.iter().map(|r| r.metrics.sessions.len()).min().unwrap_or(0);
        let summary = (0..sessions)
            .map(|i| {
                let col = |f: &dyn Fn(&crate::analysis::SessionAccuracy) -> Option<f64>| {
                    runs.iter()
                        .filter_map(|r| f(&r.metrics.sessions[i]))
                        .collect::<Vec<f64>>()
                };
                let new = col(&|s| s.new);
                SessionSummary {
                    session: runs[0].metrics.sessions[i].session,
                    all: Spread::of(&col(&|s| Some(s.all))),
                    base: Spread::of(&col(&|s| Some(s.base))),
                    new: (!new.is_empty()).then(|| Spread::of(&new)),
                }
            })
            .collect();
        let pds: Vec<f64> = runs.iter().filter_map(|r| r.metrics.pd).collect();
        Self {
            pd: (!pds.is_empty() && pds.len() == runs.len()).then(|| Spread::of(&pds)),
            runs,
            summary,
        }
    }
}

/// The full pipeline over every configured seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let runs = map_seeds(&config.seeds, |s| run_seed(config, s))?;
    Ok(ExperimentResult::from_runs(runs))
}

/// The six flag combinations of the ablation study, from none to all.
pub const ABLATION_ROWS: [Ablation; 6] = [
    Ablation::NONE,
    Ablation {
        fm: false,
        pf: false,
        pc: true,
        pn: false,
    },
    Ablation {
        fm: true,
        pf: true,
        pc: false,
        pn: true,
    },
    Ablation {
        fm: true,
        pf: false,
        pc: true,
        pn: true,
    },
    Ablation {
        fm: true,
        pf: true,
        pc: true,
        pn: false,
    },
    Ablation::ALL,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: Ablation,
    /// Mean accuracy per session across seeds.
    pub accuracies: Vec<f64>,
    pub pd: f64,
    /// One entry per seed, in seed order.
    pub seed_pd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Runs every ablation row on the same data and seeds.
pub fn run_ablation_grid(config: &ExperimentConfig) -> Result<AblationTable> {
    config.validate()?;
    let mut config = config.clone();
    config.incremental = true;
    config.flatness_samples = 0;
    let per_seed = map_seeds(&config.seeds, |s| {
        let data = prepare(&config, s)?;
        ABLATION_ROWS
            .iter()
            .map(|&flags| Ok(run_prepared(&config.with_flags(flags), &data)?.0))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(r, &flags)| {
            let runs: Vec<RunResult> = per_seed.iter().map(|row| row[r].clone()).collect();
            let summary = ExperimentResult::from_runs(runs);
            AblationRow {
                flags,
                accuracies: summary.summary.iter().map(|s| s.all.mean).collect(),
                pd: summary.pd.map_or(f64::NAN, |p| p.mean),
                seed_pd: summary.runs.iter().map(|r| r.metrics.pd.unwrap_or(f64::NAN)).collect(),
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: config.seeds.clone(),
        rows,
    })
}

pub const DEFAULT_BOUND_GRID: [f64; 6] = [0.0025, 0.005, 0.01, 0.02, 0.04, 0.08];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bound: f64,
    pub first: f64,
    pub last_all: f64,
    pub last_base: f64,
    pub last_new: Option<f64>,
}

/// The full pipeline once per bound; accuracies are means across seeds.
pub fn run_bound_sweep(config: &ExperimentConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("sweep.bounds", "grid is empty"));
    }
    if let Some(b) = grid.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
        return Err(Error::config("sweep.bounds", format!("bound {b} is not positive")));
    }
    let mut config = config.clone();
    config.flatness_samples = 0;
    config.incremental = true;
    grid.iter()
        .map(|&b| {
            let result = run_experiment(&config.with_bound(b))?;
            let first = &result.summary[0];
            let last = result.summary.last().expect("at least one session");
            Ok(SweepRow {
                bound: b,
                first: first.all.mean,
                last_all: last.all.mean,
                last_base: last.base.mean,
                last_new: last.new.map(|s| s.mean),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// `sessions.csv`: mean accuracies per session.
pub fn write_sessions_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut out = String::from("session,acc_all,acc_base,acc_new\n");
    for s in &result.summary {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.session,
            s.all.mean,
            s.base.mean,
            opt(s.new.map(|n| n.mean))
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `ablation.csv`: one row per flag combination.
pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<()> {
    let sessions = table.rows.first().map_or(0, |r| r.accuracies.len());
    let mut out = String::from("flags,fm,pf,pc,pn");
    for s in 1..=sessions {
        out.push_str(&format!(",session_{s}"));
    }
    out.push_str(",pd\n");
    for row in &table.rows {
        let f = row.flags;
        out.push_str(&format!(
            "\"{}\",{},{},{},{}",
            row.flags.label(),
            f.fm as u8,
            f.pf as u8,
            f.pc as u8,
            f.pn as u8
        ));
        for a in &row.accuracies {
            out.push_str(&format!(",{a}"));
        }
        out.push_str(&format!(",{}\n", row.pd));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `sweep.csv`: one row per bound.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("b,session_1,last_all,last_base,last_new\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.bound,
            r.first,
            r.last_all,
            r.last_base,
            opt(r.last_new)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
