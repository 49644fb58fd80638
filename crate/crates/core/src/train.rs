//! Base-session flat-minima search and in-region incremental fine-tuning.
//!
//! Base training minimizes the noise-averaged loss
//! `1/M Σ_j L_base(z; φ + ε_j, ψ)` where `L_base` is cross-entropy plus a
//! prototype-fixing penalty `λ/|C| Σ_c ‖p_c − p_c*‖²` comparing prototypes
//! under the perturbed and clean embedding. Each step moves `θ` against the
//! averaged gradient. Incremental sessions fine-tune the noise-eligible part
//! of `φ` with a distance-based softmax loss and clamp it back into the box
//! `[φ* − b, φ* + b]` after every update.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_forward, Tape};
use crate::data::{Dataset, SessionSpec};
use crate::error::{Error, Result};
use crate::net::{embed, NoiseVector, ParamSet, TapedParams};
use crate::proto::{
    compute_prototypes, normalize_prototypes, select_exemplars, ExemplarBuffer, PrototypeStore, BASE_SESSION,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Half-width `b` of the uniform noise box.
    #[serde(rename = "b")]
    pub bound: f64,
    /// Noise draws `M` per step.
    pub samples: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            bound: 0.01,
            samples: 2,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::config("b", format!("must be positive, got {}", self.bound)));
        }
        if self.samples == 0 {
            return Err(Error::config("noise_samples", "must be at least 1"));
        }
        Ok(())
    }
}

/// Stream of i.i.d. uniform `[−b, b]` draws on a coordinate mask.
#[derive(Clone, Debug)]
pub struct NoiseSampler {
    rng: ChaCha8Rng,
    dist: Uniform<f64>,
    mask: Vec<bool>,
}

impl NoiseSampler {
    pub fn new(bound: f64, seed: u64, mask: Vec<bool>) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::config("b", format!("must be positive, got {bound}")));
        }
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::config("b", e.to_string()))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist,
            mask,
        })
    }

    pub fn for_params(spec: &NoiseSpec, params: &ParamSet) -> Result<Self> {
        Self::new(spec.bound, spec.seed, params.eligible_mask())
    }

    pub fn draw(&mut self) -> NoiseVector {
        NoiseVector(
            self.mask
                .iter()
                .map(|&m| if m { self.dist.sample(&mut self.rng) } else { 0.0 })
                .collect(),
        )
    }

    pub fn draw_many(&mut self, count: usize) -> Vec<NoiseVector> {
        (0..count).map(|_| self.draw()).collect()
    }
}

/// One noise vector, the first draw of the stream seeded by `spec.seed`.
pub fn sample_noise(spec: &NoiseSpec, params: &ParamSet) -> Result<NoiseVector> {
    Ok(NoiseSampler::for_params(spec, params)?.draw())
}

/// Which parts of the method are switched on. Serializes as a label such
/// as `"fm,pc"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ablation {
    /// Noise-averaged flat-minima search during base training.
    pub fm: bool,
    /// Prototype-fixing penalty in the base loss.
    pub pf: bool,
    /// Clamping to the flat region during incremental sessions.
    pub pc: bool,
    /// Prototype normalization to a shared norm.
    pub pn: bool,
}

impl Ablation {
    pub const ALL: Ablation = Ablation {
        fm: true,
        pf: true,
        pc: true,
        pn: true,
    };
    pub const NONE: Ablation = Ablation {
        fm: false,
        pf: false,
        pc: false,
        pn: false,
    };

    /// Parses a comma-separated list such as `fm,pf,pc,pn`; `none` or an
    /// empty string switches everything off.
    pub fn parse(list: &str) -> Result<Self> {
        let mut out = Ablation::NONE;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "fm" => out.fm = true,
                "pf" => out.pf = true,
                "pc" => out.pc = true,
                "pn" => out.pn = true,
                "none" => {}
                other => {
                    return Err(Error::config("flags", format!("unknown flag `{other}`")));
                }
            }
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.fm, "fm"), (self.pf, "pf"), (self.pc, "pc"), (self.pn, "pn")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join(",")
        }
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Ablation::parse(&value)
    }
}

impl From<Ablation> for String {
    fn from(value: Ablation) -> Self {
        value.label()
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_epochs: usize,
    /// Base step size `α₀`.
    pub base_lr: f64,
    /// `γ` in `α_k = α₀ / (1 + γ k)`; zero keeps the step constant.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Prototype-fixing weight `λ`.
    pub lambda: f64,
    pub incremental_epochs: usize,
    /// Incremental step size `β`.
    pub incremental_lr: f64,
    pub exemplars_per_class: usize,
    pub flags: Ablation,
    pub noise: NoiseSpec,
    /// Seed for minibatch shuffling and exemplar selection.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_epochs: 30,
            base_lr: 0.05,
            lr_decay: 0.0,
            batch_size: 64,
            lambda: 1.0,
            incremental_epochs: 6,
            incremental_lr: 0.02,
            exemplars_per_class: 5,
            flags: Ablation::ALL,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(self.incremental_lr.is_finite() && self.incremental_lr > 0.0) {
            return Err(Error::config("incremental_lr", "must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            return Err(Error::config("lr_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Step size at global step `k`.
    pub fn step_size(&self, k: usize) -> f64 {
        self.base_lr / (1.0 + self.lr_decay * k as f64)
    }

    /// Noise draws and penalty weight actually used by base training.
    pub fn effective_base(&self) -> (usize, f64) {
        let m = if self.flags.fm { self.noise.samples } else { 1 };
        let lambda = if self.flags.pf { self.lambda } else { 0.0 };
        (m, lambda)
    }
}

/// A loss over a flat parameter vector whose value and gradient are taken at
/// `theta + noise`.
pub trait NoisyObjective: Sync {
    fn noisy_loss_grad(&self, theta: &[f64], noise: &[f64]) -> Result<(f64, Vec<f64>)>;
}

fn map_draws<O: NoisyObjective>(objective: &O, theta: &[f64], noises: &[NoiseVector]) -> Result<Vec<(f64, Vec<f64>)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if noises.len() > 1 {
            return noises
                .par_iter()
                .map(|n| objective.noisy_loss_grad(theta, n.as_slice()))
                .collect();
        }
    }
    noises
        .iter()
        .map(|n| objective.noisy_loss_grad(theta, n.as_slice()))
        .collect()
}

/// Mean loss and mean gradient over the given draws. Per-draw results are
/// summed in draw order, so parallel evaluation matches sequential bit for bit.
pub fn multi_noise_loss<O: NoisyObjective>(
    objective: &O,
    theta: &[f64],
    noises: &[NoiseVector],
) -> Result<(f64, Vec<f64>)> {
    if noises.is_empty() {
        return Err(Error::Contract("at least one noise draw is required".into()));
    }
    let draws = map_draws(objective, theta, noises)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for (l, g) in &draws {
        if g.len() != theta.len() {
            return Err(Error::Dimension {
                op: "multi_noise_loss",
                left: vec![theta.len()],
                right: vec![g.len()],
            });
        }
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let m = noises.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((loss / m, grad))
}

/// `θ ← θ − α g`, refusing non-finite gradients.
pub fn descend(theta: &mut [f64], grad: &[f64], alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config("step size", "must be positive"));
    }
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(pos));
    }
    theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= alpha * g);
    Ok(())
}

/// One noise-averaged gradient step on a generic objective; returns the
/// averaged loss before the step.
pub fn noisy_sgd_step<O: NoisyObjective>(
    objective: &O,
    theta: &mut [f64],
    noises: &[NoiseVector],
    alpha: f64,
) -> Result<f64> {
    let (loss, grad) = multi_noise_loss(objective, theta, noises)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(0));
    }
    descend(theta, &grad, alpha)?;
    Ok(loss)
}

/// Averaging matrix `A[c, i] = 1/n_c` for samples of class `classes[c]`.
fn averaging_matrix(labels: &[usize], classes: &[usize]) -> Tensor {
    let n = labels.len();
    let mut a = vec![0.0; classes.len() * n];
    for (c, &class) in classes.iter().enumerate() {
        let count = labels.iter().filter(|&&l| l == class).count() as f64;
        for (i, &l) in labels.iter().enumerate() {
            if l == class {
                a[c * n + i] = 1.0 / count;
            }
        }
    }
    Tensor::from_parts(vec![classes.len(), n], a)
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Prototypes of the classes present in a batch, at the given parameters.
/// Uses the same arithmetic as the penalty term of [`base_loss`], so clean
/// and noiseless-perturbed prototypes agree exactly.
pub fn batch_prototypes(params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let classes = distinct(labels);
    let e = embed(params, x)?;
    let p = matmul_forward(&averaging_matrix(labels, &classes), &e)?;
    Ok(classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, p.row(i).to_vec()))
        .collect())
}

/// Where the penalty's clean prototypes `p_c*` come from.
enum Clean {
    /// Penalty off (`λ = 0`).
    Off,
    /// Supplied constants.
    Fixed(Tensor),
    /// Recomputed from the unperturbed parameters on the tape, so the
    /// gradient includes their dependence on `θ`.
    Tracked,
}

/// The base objective on one minibatch.
pub struct BaseObjective<'a> {
    layout: &'a ParamSet,
    x: &'a Tensor,
    labels: &'a [usize],
    lambda: f64,
    classes: Vec<usize>,
    clean: Clean,
}

impl<'a> BaseObjective<'a> {
    fn check(x: &Tensor, labels: &[usize]) -> Result<()> {
        if x.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "base_loss batch",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(())
    }

    /// `clean` holds `p_c*` for (at least) every class in the batch and is
    /// treated as constant; it is ignored when `lambda` is zero.
    pub fn new(
        layout: &'a ParamSet,
        x: &'a Tensor,
        labels: &'a [usize],
        lambda: f64,
        clean: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        Self::check(x, labels)?;
        let classes = distinct(labels);
        let clean = if lambda > 0.0 {
            let mut rows = Vec::with_capacity(classes.len());
            for c in &classes {
                let p = clean
                    .get(c)
                    .ok_or_else(|| Error::State(format!("no clean prototype for batch class {c}")))?;
                rows.push(p.clone());
            }
            Clean::Fixed(Tensor::from_rows(&rows)?)
        } else {
            Clean::Off
        };
        Ok(Self {
            layout,
            x,
            labels,
            lambda,
            classes,
            clean,
        })
    }

    /// The objective used for training: `p_c*` is the batch prototype at
    /// the unperturbed `θ` passed to each evaluation, and is differentiated
    /// along with the rest of the loss.
    pub fn at(layout: &'a ParamSet, x: &'a Tensor, labels: &'a [usize], lambda: f64) -> Result<Self> {
        Self::check(x, labels)?;
        Ok(Self {
            layout,
            x,
            labels,
            lambda,
            classes: distinct(labels),
            clean: if lambda > 0.0 { Clean::Tracked } else { Clean::Off },
        })
    }

    fn evaluate(&self, theta: &[f64], noise: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.layout.len() || noise.len() != theta.len() {
            return Err(Error::Contract(format!(
                "expected {} coordinates, got theta {} and noise {}",
                self.layout.len(),
                theta.len(),
                noise.len()
            )));
        }
        let mut tape = Tape::new();
        let clean_vars = TapedParams::record(&mut tape, self.layout, theta);
        let vars = clean_vars.offset(&mut tape, self.layout, noise)?;
        let x = tape.constant(self.x.clone());
        let e = vars.embed(&mut tape, x)?;
        let logits = vars.head(&mut tape, e)?;
        let mut loss = tape.softmax_cross_entropy(logits, self.labels)?;
        let fixed = match &self.clean {
            Clean::Off => None,
            Clean::Fixed(p) => Some(tape.constant(p.clone())),
            Clean::Tracked if vars == clean_vars => None,
            Clean::Tracked => {
                let a = tape.constant(averaging_matrix(self.labels, &self.classes));
                let e0 = clean_vars.embed(&mut tape, x)?;
                Some(tape.matmul(a, e0)?)
            }
        };
        if let Some(fixed) = fixed {
            let a = tape.constant(averaging_matrix(self.labels, &self.classes));
            let noisy = tape.matmul(a, e)?;
            let diff = tape.sub(noisy, fixed)?;
            let sq = tape.sum_squares(diff)?;
            let penalty = tape.scale(sq, self.lambda / self.classes.len() as f64)?;
            loss = tape.add(loss, penalty)?;
        }
        let value = tape.value(loss).values()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, grads.flatten()))
    }
}

impl NoisyObjective for BaseObjective<'_> {
    fn noisy_loss_grad(&self, theta: &[f64], noise: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluate(theta, noise, true)
    }
}

/// Cross-entropy of the perturbed network plus the prototype-fixing penalty.
pub fn base_loss(
    params: &ParamSet,
    noise: &NoiseVector,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    clean_prototypes: &BTreeMap<usize, Vec<f64>>,
) -> Result<f64> {
    let objective = BaseObjective::new(params, x, labels, lambda, clean_prototypes)?;
    Ok(objective.evaluate(params.values(), noise.as_slice(), false)?.0)
}

/// One base update on a minibatch: `θ ← θ − α_k/M Σ_j ∇L_base(φ + ε_j, ψ)`.
pub fn base_train_step(
    params: &mut ParamSet,
    noises: &[NoiseVector],
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    alpha: f64,
) -> Result<f64> {
    let layout = params.clone();
    let objective = BaseObjective::at(&layout, x, labels, lambda)?;
    let mut theta = params.flatten();
    let loss = noisy_sgd_step(&objective, &mut theta, noises, alpha)?;
    params.values_mut().copy_from_slice(&theta);
    Ok(loss)
}

/// The clampable box around the base solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatRegion {
    /// Flat indices of the governed coordinates.
    pub indices: Vec<usize>,
    /// `φ*` on those coordinates.
    pub anchor: Vec<f64>,
    pub bound: f64,
}

impl FlatRegion {
    /// Anchors the region at the current noise-eligible coordinates.
    pub fn capture(params: &ParamSet, bound: f64) -> Self {
        let indices: Vec<usize> = params
            .eligible_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let anchor = indices.iter().map(|&i| params.values()[i]).collect();
        Self { indices, anchor, bound }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        if self.indices.len() != self.anchor.len() || self.indices.iter().any(|&i| i >= params.len()) {
            return Err(Error::Contract(format!(
                "region with {} anchors does not fit {} parameters",
                self.anchor.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// `‖φ − φ*‖_∞` over the governed coordinates.
    pub fn max_drift(&self, params: &ParamSet) -> Result<f64> {
        self.check(params)?;
        Ok(self
            .indices
            .iter()
            .zip(&self.anchor)
            .map(|(&i, a)| (params.values()[i] - a).abs())
            .fold(0.0, f64::max))
    }

    /// True when every governed coordinate satisfies `|φ_i − φ*_i| ≤ b`.
    pub fn contains(&self, params: &ParamSet) -> Result<bool> {
        Ok(self.max_drift(params)? <= self.bound)
    }
}

/// Box edges around `anchor` pulled inward until the computed distance to
/// the anchor is at most `bound`; `anchor ± bound` alone can round outward.
fn box_edges(anchor: f64, bound: f64) -> (f64, f64) {
    let mut lo = anchor - bound;
    while (lo - anchor).abs() > bound {
        lo = lo.next_up();
    }
    let mut hi = anchor + bound;
    while (hi - anchor).abs() > bound {
        hi = hi.next_down();
    }
    (lo, hi)
}

/// Projects the governed coordinates onto the box; others are untouched.
pub fn clamp_to_region(params: &mut ParamSet, region: &FlatRegion) -> Result<()> {
    region.check(params)?;
    let values = params.values_mut();
    for (&i, &a) in region.indices.iter().zip(&region.anchor) {
        let (lo, hi) = box_edges(a, region.bound);
        values[i] = values[i].clamp(lo, hi);
    }
    Ok(())
}

/// Result of base training.
#[derive(Clone, Debug)]
pub struct BaseOutcome {
    pub params: ParamSet,
    pub region: FlatRegion,
    pub store: PrototypeStore,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains on the base session; see [`train_base_with`].
pub fn train_base(params: ParamSet, data: &Dataset, config: &TrainConfig) -> Result<BaseOutcome> {
    train_base_with(params, data, config, |_, _| {})
}

/// Base training with an observer called after every epoch with the epoch
/// index and the current parameters.
pub fn train_base_with(
    mut params: ParamSet,
    data: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(usize, &ParamSet),
) -> Result<BaseOutcome> {
    config.validate()?;
    let classes = data.classes();
    if classes.len() < 2 || classes.iter().any(|&c| data.indices_of(c).len() < 2) {
        return Err(Error::State(
            "base session needs at least 2 classes with at least 2 samples each".into(),
        ));
    }
    let (m, lambda) = config.effective_base();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = NoiseSampler::for_params(&config.noise, &params)?;
    let zero = NoiseVector::zeros(params.len());

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.base_epochs);
    let mut step = 0usize;
    for epoch in 0..config.base_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = data.batch(chunk)?;
            let noises = if config.flags.fm {
                sampler.draw_many(m)
            } else {
                vec![zero.clone()]
            };
            let loss = base_train_step(&mut params, &noises, &x, &labels, lambda, config.step_size(step)).map_err(
                |e| match e {
                    Error::NonFinite(_) => Error::Divergence { epoch, batch },
                    other => other,
                },
            )?;
            total += loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches as f64);
        observe(epoch, &params);
    }

    let region = FlatRegion::capture(&params, config.noise.bound);
    let mut store = PrototypeStore::new();
    store.insert_all(compute_prototypes(&params, data, &classes)?, BASE_SESSION)?;
    if config.flags.pn {
        normalize_prototypes(&mut store)?;
    }
    Ok(BaseOutcome {
        params,
        region,
        store,
        epoch_losses,
    })
}

/// Distance-softmax objective over a fixed prototype set.
pub struct MetricObjective<'a> {
    layout: &'a ParamSet,
    x: Tensor,
    rows: Vec<usize>,
    prototypes: Tensor,
}

impl<'a> MetricObjective<'a> {
    pub fn new(layout: &'a ParamSet, prototypes: &PrototypeStore, batch: &Dataset) -> Result<Self> {
        let (matrix, ids) = prototypes.matrix()?;
        let rows = batch
            .labels()
            .iter()
            .map(|l| {
                ids.binary_search(l)
                    .map_err(|_| Error::State(format!("no prototype for class {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout,
            x: batch.to_tensor()?,
            rows,
            prototypes: matrix,
        })
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = TapedParams::record(&mut tape, self.layout, theta);
        let x = tape.constant(self.x.clone());
        let e = vars.embed(&mut tape, x)?;
        let p = tape.constant(self.prototypes.clone());
        let logits = tape.neg_sq_dist(e, p)?;
        let loss = tape.softmax_cross_entropy(logits, &self.rows)?;
        let value = tape.value(loss).values()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        Ok((value, tape.backward(loss)?.flatten()))
    }

    pub fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluate(theta, true)
    }
}

/// Mean over the batch of `−log softmax(−‖f(x) − p_c‖²)[y]`.
pub fn metric_loss(params: &ParamSet, prototypes: &PrototypeStore, batch: &Dataset) -> Result<f64> {
    let objective = MetricObjective::new(params, prototypes, batch)?;
    Ok(objective.evaluate(params.values(), false)?.0)
}

/// Everything carried from one session to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub params: ParamSet,
    pub region: Option<FlatRegion>,
    pub store: PrototypeStore,
    pub exemplars: ExemplarBuffer,
    /// Index of the last completed session.
    pub session: usize,
}

impl RunState {
    pub fn from_base(outcome: BaseOutcome, exemplar_capacity: usize) -> Self {
        Self {
            params: outcome.params,
            region: Some(outcome.region),
            store: outcome.store,
            exemplars: ExemplarBuffer::new(exemplar_capacity),
            session: BASE_SESSION,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("params.json"), serde_json::to_vec(&self.params)?)?;
        std::fs::write(dir.join("region.json"), serde_json::to_vec(&self.region)?)?;
        self.store.save(&dir.join("prototypes.json"))?;
        std::fs::write(dir.join("exemplars.json"), serde_json::to_vec(&self.exemplars)?)?;
        std::fs::write(dir.join("session.json"), serde_json::to_vec(&self.session)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| std::fs::read(dir.join(name));
        Ok(Self {
            params: serde_json::from_slice(&read("params.json")?)?,
            region: serde_json::from_slice(&read("region.json")?)?,
            store: PrototypeStore::load(&dir.join("prototypes.json"))?,
            exemplars: serde_json::from_slice(&read("exemplars.json")?)?,
            session: serde_json::from_slice(&read("session.json")?)?,
        })
    }
}

/// Per-session training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub losses: Vec<f64>,
    /// `‖φ − φ*‖_∞` after each clamp (empty when clamping is off).
    pub drift_after_clamp: Vec<f64>,
}

/// Fine-tunes on one few-shot session, then saves exemplars and prototypes
/// of its classes.
pub fn incremental_session(state: &mut RunState, session: &SessionSpec, config: &TrainConfig) -> Result<SessionTrace> {
    if session.index <= BASE_SESSION {
        return Err(Error::Protocol(format!(
            "incremental sessions start at {}, got {}",
            BASE_SESSION + 1,
            session.index
        )));
    }
    if let Some(c) = session.classes.iter().find(|&&c| state.store.contains(c)) {
        return Err(Error::Protocol(format!("class {c} was already learned")));
    }
    let region = match (&state.region, config.flags.pc) {
        (Some(r), _) => Some(r.clone()),
        (None, true) => {
            return Err(Error::State(
                "clamping requested but no flat region was captured".into(),
            ))
        }
        (None, false) => None,
    };
    let mut combined = session.train.clone();
    combined.extend(&state.exemplars.to_dataset(session.train.dim())?)?;
    let trainable = state.params.eligible_mask();
    let mut trace = SessionTrace::default();

    for epoch in 0..config.incremental_epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Divergence { epoch, batch: 0 },
            other => other,
        };
        let mut current = compute_prototypes(&state.params, &session.train, &session.classes).map_err(diverged)?;
        if config.flags.pn {
            if let Some(target) = state.store.target_norm() {
                rescale_all(&mut current, target);
            }
        }
        let mut view = state.store.clone();
        view.insert_all(current, session.index)?;
        let objective = MetricObjective::new(&state.params, &view, &combined).map_err(diverged)?;
        let (loss, grad) = objective.loss_grad(state.params.values()).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        let masked: Vec<f64> = grad
            .iter()
            .zip(&trainable)
            .map(|(&g, &t)| if t { g } else { 0.0 })
            .collect();
        descend(state.params.values_mut(), &masked, config.incremental_lr).map_err(diverged)?;
        if config.flags.pc {
            let region = region.as_ref().expect("checked above");
            clamp_to_region(&mut state.params, region)?;
            trace.drift_after_clamp.push(region.max_drift(&state.params)?);
        }
        trace.losses.push(loss);
    }

    let exemplar_seed = config.seed ^ (session.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let picked = select_exemplars(&session.train, config.exemplars_per_class, exemplar_seed);
    state.exemplars.add(session.index, &picked)?;
    let protos = compute_prototypes(&state.params, &session.train, &session.classes).map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence {
            epoch: config.incremental_epochs,
            batch: 0,
        },
        other => other,
    })?;
    state.store.insert_all(protos, session.index)?;
    if config.flags.pn {
        normalize_prototypes(&mut state.store)?;
    }
    state.session = session.index;
    Ok(trace)
}

fn rescale_all(protos: &mut BTreeMap<usize, Vec<f64>>, target: f64) {
    for v in protos.values_mut() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x *= target / norm);
        }
    }
}
