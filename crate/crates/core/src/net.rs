//! MLP embedding network `f(x; φ)` with a linear classifier head `ψ`.
//!
//! Parameters live in one flat buffer described by an ordered list of
//! [`ParamSpec`]s: `embed.{i}.weight`, `embed.{i}.bias` for every embedding
//! layer, then `head.weight`, `head.bias`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_forward, relu, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub class_count: usize,
    /// Trailing embedding layers that receive noise (and are later clamped).
    pub noise_last_k: usize,
    /// Whether biases of the noise layers are noise-eligible too.
    pub noise_biases: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![64],
            embedding_dim: 8,
            class_count: 20,
            noise_last_k: 2,
            noise_biases: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn embed_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be at least 1"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim", "must be at least 1"));
        }
        if self.class_count == 0 {
            return Err(Error::config("class_count", "must be at least 1"));
        }
        if self.noise_last_k > self.embed_layers() {
            return Err(Error::config(
                "noise_last_k",
                format!(
                    "{} exceeds the {} embedding layers",
                    self.noise_last_k,
                    self.embed_layers()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub noise_eligible: bool,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// The model parameters `θ = {φ, ψ}` over one flat buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

/// A perturbation over the full parameter vector; zero off the eligible set.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector(pub Vec<f64>);

impl NoiseVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Original values of the coordinates touched by [`ParamSet::apply_noise`].
#[derive(Debug)]
#[must_use = "pass the token to ParamSet::reset to restore the parameters"]
pub struct NoiseReset {
    saved: Vec<(usize, f64)>,
}

impl ParamSet {
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Same layout, new values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "unflatten",
                left: vec![self.values.len()],
                right: vec![flat.len()],
            });
        }
        Ok(ParamSet {
            specs: self.specs.clone(),
            values: flat.to_vec(),
        })
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        let spec = &self.specs[index];
        Tensor::from_parts(spec.shape.clone(), self.values[spec.range()].to_vec())
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.find(name).map(|i| &self.values[self.specs[i].range()])
    }

    pub fn embed_layer_count(&self) -> usize {
        (self.specs.len() - 2) / 2
    }

    pub fn class_count(&self) -> usize {
        self.specs[self.specs.len() - 1].len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.specs[self.specs.len() - 2 - 1].len()
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].shape[0]
    }

    /// Per-coordinate noise eligibility.
    pub fn eligible_mask(&self) -> Vec<bool> {
        self.coordinate_mask(|s| s.noise_eligible)
    }

    /// Per-coordinate membership in `φ`.
    pub fn embedding_mask(&self) -> Vec<bool> {
        self.coordinate_mask(|s| s.group == Group::Embedding)
    }

    fn coordinate_mask(&self, pick: impl Fn(&ParamSpec) -> bool) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for spec in self.specs.iter().filter(|s| pick(s)) {
            mask[spec.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn eligible_count(&self) -> usize {
        self.specs.iter().filter(|s| s.noise_eligible).map(ParamSpec::len).sum()
    }

    fn check_noise(&self, noise: &NoiseVector) -> Result<()> {
        if noise.0.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "noise has {} coordinates, parameters have {}",
                noise.0.len(),
                self.values.len()
            )));
        }
        for spec in self.specs.iter().filter(|s| !s.noise_eligible) {
            if noise.0[spec.range()].iter().any(|&v| v != 0.0) {
                return Err(Error::Contract(format!(
                    "noise touches non-eligible parameter `{}`",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    /// Adds `noise` to the eligible coordinates in place.
    pub fn apply_noise(&mut self, noise: &NoiseVector) -> Result<NoiseReset> {
        self.check_noise(noise)?;
        let mut saved = Vec::new();
        for spec in self.specs.iter().filter(|s| s.noise_eligible) {
            for i in spec.range() {
                saved.push((i, self.values[i]));
                self.values[i] += noise.0[i];
            }
        }
        Ok(NoiseReset { saved })
    }

    pub fn reset(&mut self, token: NoiseReset) {
        for (i, v) in token.saved {
            self.values[i] = v;
        }
    }

    /// A perturbed copy, leaving `self` untouched.
    pub fn perturbed(&self, noise: &NoiseVector) -> Result<ParamSet> {
        let mut copy = self.clone();
        let token = copy.apply_noise(noise)?;
        drop(token);
        Ok(copy)
    }
}

pub fn init_network(config: &NetworkConfig) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut specs = Vec::new();
    let mut values = Vec::new();

    let mut dims = vec![config.input_dim];
    dims.extend(&config.hidden);
    dims.push(config.embedding_dim);
    let layers = config.embed_layers();
    let first_noisy = layers - config.noise_last_k;

    let mut push_layer = |name: &str, fan_in: usize, fan_out: usize, group: Group, noisy: bool| {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![fan_in, fan_out],
            group,
            noise_eligible: noisy,
            offset: values.len(),
        });
        values.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
        specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![fan_out],
            group,
            noise_eligible: noisy && config.noise_biases,
            offset: values.len(),
        });
        values.extend(std::iter::repeat_n(0.0, fan_out));
    };

    for layer in 0..layers {
        push_layer(
            &format!("embed.{layer}"),
            dims[layer],
            dims[layer + 1],
            Group::Embedding,
            layer >= first_noisy,
        );
    }
    push_layer(
        "head",
        config.embedding_dim,
        config.class_count,
        Group::Classifier,
        false,
    );
    Ok(ParamSet { specs, values })
}

fn check_input(params: &ParamSet, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.cols() != params.input_dim() {
        return Err(Error::Dimension {
            op: "embed",
            left: x.shape().to_vec(),
            right: vec![params.input_dim()],
        });
    }
    Ok(())
}

/// `f(x; φ)`: linear + ReLU per hidden layer, final embedding layer linear.
pub fn embed(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    check_input(params, x)?;
    let layers = params.embed_layer_count();
    let mut h = x.clone();
    for layer in 0..layers {
        h = linear_forward(&h, &params.tensor(2 * layer), &params.tensor(2 * layer + 1))?;
        if layer + 1 < layers {
            h = relu(&h);
        }
    }
    Ok(h)
}

pub fn logits(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let e = embed(params, x)?;
    let head = 2 * params.embed_layer_count();
    linear_forward(&e, &params.tensor(head), &params.tensor(head + 1))
}

/// Parameter handles for one recorded forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TapedParams {
    pub vars: Vec<Var>,
}

impl TapedParams {
    /// Records every parameter as a differentiable leaf holding `values`
    /// (which may be a perturbed copy of `params`).
    pub fn record(tape: &mut Tape, params: &ParamSet, values: &[f64]) -> Self {
        let vars = params
            .specs()
            .iter()
            .map(|s| tape.param(Tensor::from_parts(s.shape.clone(), values[s.range()].to_vec())))
            .collect();
        Self { vars }
    }

    /// Parameters shifted by a constant `offset`. Tensors whose offset is
    /// all zero keep their original variable.
    pub fn offset(&self, tape: &mut Tape, params: &ParamSet, offset: &[f64]) -> Result<Self> {
        let mut vars = Vec::with_capacity(self.vars.len());
        for (spec, &v) in params.specs().iter().zip(&self.vars) {
            let slice = &offset[spec.range()];
            if slice.iter().all(|&d| d == 0.0) {
                vars.push(v);
            } else {
                let shift = tape.constant(Tensor::from_parts(spec.shape.clone(), slice.to_vec()));
                vars.push(tape.add(v, shift)?);
            }
        }
        Ok(Self { vars })
    }

    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let layers = (self.vars.len() - 2) / 2;
        let mut h = x;
        for layer in 0..layers {
            h = tape.linear(h, self.vars[2 * layer], self.vars[2 * layer + 1])?;
            if layer + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn head(&self, tape: &mut Tape, embedding: Var) -> Result<Var> {
        let n = self.vars.len();
        tape.linear(embedding, self.vars[n - 2], self.vars[n - 1])
    }
}

/// Network configuration plus parameters, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
