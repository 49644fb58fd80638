//! Run configuration: TOML or JSON files plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::experiment::{DataConfig, ExperimentConfig, DEFAULT_BOUND_GRID};
use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::train::{Ablation, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    F2m,
    Baseline,
    Ablation,
    Sweep,
    Flatness,
    Convergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlatnessConfig {
    pub samples: usize,
    /// Directory written by `train-base` (or `run`) to probe instead of
    /// training a fresh base model.
    pub checkpoint: Option<PathBuf>,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub bounds: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            bounds: DEFAULT_BOUND_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    /// Full-batch base objective on the base session of the first seed.
    #[default]
    Base,
    /// A separable convex quadratic.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub problem: Problem,
    pub steps: usize,
    /// `α₀` of `α_k = α₀ / (1 + γ k)`.
    pub alpha0: f64,
    /// `γ`.
    pub decay: f64,
    /// Record the gradient-norm estimate every this many steps.
    pub every: usize,
    /// Dimension of the quadratic problem.
    pub dim: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Base,
            steps: 500,
            alpha0: 0.1,
            decay: 0.01,
            every: 10,
            dim: 16,
        }
    }
}

/// Everything a subcommand needs, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub flatness: FlatnessConfig,
    pub sweep: SweepConfig,
    pub convergence: ConvergenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            out: PathBuf::from("f2m-out"),
            seeds: vec![0],
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            flatness: FlatnessConfig::default(),
            sweep: SweepConfig::default(),
            convergence: ConvergenceConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub bound: Option<f64>,
    pub noise_samples: Option<usize>,
    pub lambda: Option<f64>,
    pub flags: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        if self.sweep.bounds.is_empty() {
            return Err(Error::config("sweep.bounds", "grid is empty"));
        }
        if let Some(b) = self.sweep.bounds.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::config("sweep.bounds", format!("bound {b} is not positive")));
        }
        let c = &self.convergence;
        if !(c.alpha0.is_finite() && c.alpha0 > 0.0) {
            return Err(Error::config("convergence.alpha0", "must be positive"));
        }
        if !(c.decay.is_finite() && c.decay >= 0.0) {
            return Err(Error::config("convergence.decay", "must be non-negative"));
        }
        if c.every == 0 || c.dim == 0 {
            return Err(Error::config("convergence.every", "every and dim must be at least 1"));
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            network: self.network.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
            seeds: self.seeds.clone(),
            flatness_samples: self.flatness.samples,
            incremental: true,
        }
    }

    fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(mode) = o.mode {
            self.mode = mode;
        }
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(b) = o.bound {
            self.train.noise.bound = b;
        }
        if let Some(m) = o.noise_samples {
            self.train.noise.samples = m;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(flags) = &o.flags {
            self.train.flags = Ablation::parse(flags)?;
        }
        if let Some(dir) = &o.checkpoint {
            self.flatness.checkpoint = Some(dir.clone());
        }
        Ok(())
    }
}

/// Parses a TOML document. Unknown keys and type mismatches surface as
/// config errors naming the dotted key path.
pub fn from_toml(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("config", e.message().trim().to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| path_error(e.path(), e.inner().message()))
}

/// Parses a JSON document: either a bare config or a run manifest.
pub fn from_json(text: &str) -> Result<RunConfig> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let config = match value.get("config") {
        Some(inner) if value.get("tool").is_some() => inner.clone(),
        _ => value,
    };
    serde_path_to_error::deserialize(config).map_err(|e| path_error(e.path(), &e.inner().to_string()))
}

fn path_error(path: &serde_path_to_error::Path, message: &str) -> Error {
    let path = path.to_string();
    let key = if path == "." { "config".to_string() } else { path };
    Error::config(key, message.trim().to_string())
}

/// Reads the file (if any), applies defaults and overrides, then validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            if p.extension().is_some_and(|e| e == "json") {
                from_json(&text)?
            } else {
                from_toml(&text)?
            }
        }
    };
    config.apply(overrides)?;
    config.validate()?;
    Ok(config)
}

/// `run_manifest.json`: the resolved config and the tool that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
        }
    }
}
