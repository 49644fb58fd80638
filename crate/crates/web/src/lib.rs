//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every export takes a JSON options object and returns a JSON string, so the
//! page needs no generated TypeScript types. The same operations are callable
//! natively through the typed functions below.

use f2m::analysis::flatness_indicator;
use f2m::bench::experiment::{prepare, run_base, run_prepared, SweepRow};
use f2m::bench::{run_bound_sweep, ExperimentConfig, DEFAULT_BOUND_GRID};
use f2m::train::Ablation;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Knobs exposed on the page. Everything else keeps the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoOptions {
    pub seed: u64,
    pub bound: f64,
    pub noise_samples: usize,
    pub lambda: f64,
    pub incremental_epochs: usize,
    pub incremental_lr: f64,
    /// Perturbations per point of the flatness profile.
    pub probe_samples: usize,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            bound: 0.01,
            noise_samples: 2,
            lambda: 1.0,
            incremental_epochs: 6,
            incremental_lr: 0.02,
            probe_samples: 200,
        }
    }
}

impl DemoOptions {
    pub fn from_json(text: &str) -> Result<Self, String> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).map_err(|e| format!("bad options: {e}"))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            seeds: vec![self.seed],
            flatness_samples: 0,
            ..ExperimentConfig::default()
        };
        c.train.noise.bound = self.bound;
        c.train.noise.samples = self.noise_samples;
        c.train.lambda = self.lambda;
        c.train.incremental_epochs = self.incremental_epochs;
        c.train.incremental_lr = self.incremental_lr;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub name: String,
    pub all: Vec<f64>,
    pub base: Vec<f64>,
    /// Accuracy on new classes; `None` in the base session.
    pub new: Vec<Option<f64>>,
    pub pd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionCurves {
    pub sessions: Vec<usize>,
    pub curves: Vec<Curve>,
}

/// Per-session accuracy of full F2M, naive fine-tuning and the frozen
/// baseline on one seed's data.
pub fn session_curves(options: &DemoOptions) -> f2m::Result<SessionCurves> {
    let config = options.experiment();
    let data = prepare(&config, options.seed)?;
    let variants = [
        ("F2M", config.with_flags(Ablation::ALL)),
        ("naive fine-tune", config.with_flags(Ablation::NONE)),
        ("baseline", config.baseline()),
    ];
    let mut sessions = Vec::new();
    let mut curves = Vec::new();
    for (name, c) in variants {
        let metrics = run_prepared(&c, &data)?.0.metrics;
        sessions = metrics.sessions.iter().map(|s| s.session).collect();
        curves.push(Curve {
            name: name.to_string(),
            all: metrics.sessions.iter().map(|s| s.all).collect(),
            base: metrics.sessions.iter().map(|s| s.base).collect(),
            new: metrics.sessions.iter().map(|s| s.new).collect(),
            pd: metrics.pd,
        });
    }
    Ok(SessionCurves { sessions, curves })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlatnessProfile {
    pub radii: Vec<f64>,
    pub f2m: Vec<f64>,
    pub sgd: Vec<f64>,
}

/// Flatness indicator of the F2M and plain-SGD base solutions on the base
/// training data, probed at multiples of the training bound.
pub fn flatness_profile(options: &DemoOptions) -> f2m::Result<FlatnessProfile> {
    let mut config = options.experiment();
    config.incremental = false;
    let data = prepare(&config, options.seed)?;
    let radii: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|m| m * options.bound)
        .collect();
    let base = &data.sessions[0].train;
    let probe = |c: &ExperimentConfig| -> f2m::Result<Vec<f64>> {
        let stage = run_base(c, &data)?;
        radii
            .iter()
            .map(|&r| {
                let report = flatness_indicator(
                    &stage.state.params,
                    r,
                    base,
                    options.probe_samples,
                    options.seed,
                    "train",
                )?;
                Ok(report.indicator)
            })
            .collect()
    };
    Ok(FlatnessProfile {
        f2m: probe(&config)?,
        sgd: probe(&config.baseline())?,
        radii,
    })
}

/// Accuracy after the first and last session for each bound of the default
/// grid.
pub fn bound_sweep(options: &DemoOptions) -> f2m::Result<Vec<SweepRow>> {
    run_bound_sweep(&options.experiment(), &DEFAULT_BOUND_GRID)
}

fn export<T: Serialize>(options: &str, op: impl FnOnce(&DemoOptions) -> f2m::Result<T>) -> Result<String, String> {
    let options = DemoOptions::from_json(options)?;
    let value = op(&options).map_err(|e| e.to_string())?;
    serde_json::to_string(&value).map_err(|e| e.to_string())
}

pub fn session_curves_json(options: &str) -> Result<String, String> {
    export(options, session_curves)
}

pub fn flatness_profile_json(options: &str) -> Result<String, String> {
    export(options, flatness_profile)
}

pub fn bound_sweep_json(options: &str) -> Result<String, String> {
    export(options, bound_sweep)
}

#[wasm_bindgen(js_name = sessionCurves)]
pub fn session_curves_js(options: &str) -> Result<String, JsError> {
    session_curves_json(options).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = flatnessProfile)]
pub fn flatness_profile_js(options: &str) -> Result<String, JsError> {
    flatness_profile_json(options).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = boundSweep)]
pub fn bound_sweep_js(options: &str) -> Result<String, JsError> {
    bound_sweep_json(options).map_err(|e| JsError::new(&e))
}
