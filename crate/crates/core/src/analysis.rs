//! Flatness probes, convergence monitoring and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_cross_entropy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{embed, logits, NoiseVector, ParamSet};
use crate::proto::{nearest_prototype, nearest_prototype_among, PrototypeStore};
use crate::train::{multi_noise_loss, NoiseSampler, NoisyObjective};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn compensated_mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut acc = CompensatedSum::default();
    let mut n = 0usize;
    for v in values {
        acc.add(v);
        n += 1;
    }
    (acc.value() / n as f64, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    /// Loss at the unperturbed parameters, `L*`.
    pub anchor_loss: f64,
    pub sample_losses: Vec<f64>,
    /// `I = mean (L_i − L*)²`.
    pub indicator: f64,
    /// `σ² = mean (L_i − L̄)²`.
    pub variance: f64,
    pub mean_loss: f64,
    pub sample_count: usize,
    pub bound: f64,
    pub split: String,
}

impl FlatnessReport {
    /// Summarizes perturbed losses against the anchor loss.
    pub fn from_losses(anchor_loss: f64, sample_losses: Vec<f64>, bound: f64, split: &str) -> Result<Self> {
        if sample_losses.is_empty() {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        let (indicator, n) = compensated_mean(sample_losses.iter().map(|l| (l - anchor_loss) * (l - anchor_loss)));
        let (mean_loss, _) = compensated_mean(sample_losses.iter().copied());
        let (variance, _) = compensated_mean(sample_losses.iter().map(|l| (l - mean_loss) * (l - mean_loss)));
        Ok(Self {
            anchor_loss,
            sample_losses,
            indicator,
            variance,
            mean_loss,
            sample_count: n,
            bound,
            split: split.to_string(),
        })
    }

    /// `|I − σ² − (L̄ − L*)²|`.
    pub fn identity_residual(&self) -> f64 {
        let shift = self.mean_loss - self.anchor_loss;
        (self.indicator - self.variance - shift * shift).abs()
    }
}

fn eval_all<F>(noises: &[NoiseVector], loss_at: &F) -> Result<Vec<f64>>
where
    F: Fn(&NoiseVector) -> Result<f64> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        noises.par_iter().map(loss_at).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        noises.iter().map(loss_at).collect()
    }
}

/// Probes a loss with `n_samples` draws from `sampler`; `loss_at` receives the
/// perturbation to apply. Draws are generated sequentially before evaluation,
/// so the report does not depend on evaluation order.
pub fn probe_flatness<F>(
    sampler: &mut NoiseSampler,
    bound: f64,
    n_samples: usize,
    split: &str,
    loss_at: F,
) -> Result<FlatnessReport>
where
    F: Fn(&NoiseVector) -> Result<f64> + Sync,
{
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    let noises = sampler.draw_many(n_samples);
    let len = noises[0].0.len();
    let anchor = loss_at(&NoiseVector::zeros(len))?;
    let losses = eval_all(&noises, &loss_at)?;
    FlatnessReport::from_losses(anchor, losses, bound, split)
}

/// Full-dataset cross-entropy at the given parameters.
pub fn dataset_cross_entropy(params: &ParamSet, data: &Dataset) -> Result<f64> {
    softmax_cross_entropy(&logits(params, &data.to_tensor()?)?, data.labels())
}

/// Flatness of the cross-entropy landscape around `params`, perturbing the
/// noise-eligible coordinates uniformly in `[−b, b]`.
pub fn flatness_indicator(
    params: &ParamSet,
    bound: f64,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
    split: &str,
) -> Result<FlatnessReport> {
    let mut sampler = NoiseSampler::new(bound, seed, params.eligible_mask())?;
    let x = data.to_tensor()?;
    probe_flatness(&mut sampler, bound, n_samples, split, |noise| {
        let p = params.perturbed(noise)?;
        softmax_cross_entropy(&logits(&p, &x)?, data.labels())
    })
}

/// `‖ḡ‖²` where `ḡ` averages the gradient over `m` fresh draws.
pub fn noisy_grad_norm_sq<O: NoisyObjective>(
    objective: &O,
    theta: &[f64],
    sampler: &mut NoiseSampler,
    m: usize,
) -> Result<f64> {
    let noises = sampler.draw_many(m.max(1));
    let (_, g) = multi_noise_loss(objective, theta, &noises)?;
    Ok(g.iter().map(|v| v * v).sum())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNormTrace {
    pub steps: Vec<usize>,
    pub grad_norm_sq: Vec<f64>,
}

impl GradNormTrace {
    pub fn initial(&self) -> Option<f64> {
        self.grad_norm_sq.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.grad_norm_sq.last().copied()
    }
}

/// Runs noise-averaged descent for `steps` updates with `α_k = α₀/(1 + γk)`,
/// recording the full-objective gradient-norm proxy every `every` steps
/// (including step 0 and the final step). The probe uses its own sampler so
/// the training stream is unaffected by monitoring.
#[allow(clippy::too_many_arguments)]
pub fn grad_norm_trace<O: NoisyObjective>(
    objective: &O,
    theta: &mut [f64],
    train_noise: &mut NoiseSampler,
    probe_noise: &mut NoiseSampler,
    m: usize,
    alpha0: f64,
    decay: f64,
    steps: usize,
    every: usize,
) -> Result<GradNormTrace> {
    let every = every.max(1);
    let mut trace = GradNormTrace::default();
    for k in 0..=steps {
        if k % every == 0 || k == steps {
            trace.steps.push(k);
            trace
                .grad_norm_sq
                .push(noisy_grad_norm_sq(objective, theta, probe_noise, m)?);
        }
        if k == steps {
            break;
        }
        let noises = train_noise.draw_many(m.max(1));
        crate::train::noisy_sgd_step(objective, theta, &noises, alpha0 / (1.0 + decay * k as f64))?;
    }
    Ok(trace)
}

/// `½ Σ a_i (θ_i − c_i)²`, a convex test problem for the convergence driver.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(curvature: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        if curvature.len() != center.len() {
            return Err(Error::Dimension {
                op: "quadratic",
                left: vec![curvature.len()],
                right: vec![center.len()],
            });
        }
        if curvature.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::config("curvature", "must be positive"));
        }
        Ok(Self { curvature, center })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Noise-free value at `theta`.
    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut acc = CompensatedSum::default();
        for ((a, c), t) in self.curvature.iter().zip(&self.center).zip(theta) {
            acc.add(0.5 * a * (t - c) * (t - c));
        }
        acc.value()
    }
}

impl NoisyObjective for QuadraticObjective {
    fn noisy_loss_grad(&self, theta: &[f64], noise: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.dim() || noise.len() != self.dim() {
            return Err(Error::Dimension {
                op: "quadratic",
                left: vec![self.dim()],
                right: vec![theta.len(), noise.len()],
            });
        }
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let r = theta[i] + noise[i] - self.center[i];
            loss += 0.5 * self.curvature[i] * r * r;
            grad.push(self.curvature[i] * r);
        }
        Ok((loss, grad))
    }
}

/// NCM accuracy after a session.
///
/// `all` ranks every stored prototype. `base` and `new` score each split's
/// test samples among that split's prototypes only, so a frozen extractor
/// keeps `base` fixed as classes are added; the `_joint` fields score the
/// same samples against every prototype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionAccuracy {
    pub session: usize,
    pub all: f64,
    pub base: f64,
    /// `None` before any new class has been seen.
    pub new: Option<f64>,
    pub base_joint: f64,
    pub new_joint: Option<f64>,
}

#[derive(Default)]
struct Tally {
    hit: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, correct: bool) {
        self.hit += correct as usize;
        self.total += 1;
    }

    fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hit as f64 / self.total as f64)
    }
}

/// Accuracy over test samples of every encountered class.
pub fn session_accuracy(
    params: &ParamSet,
    store: &PrototypeStore,
    test: &Dataset,
    base_classes: &[usize],
    session: usize,
) -> Result<SessionAccuracy> {
    let encountered = store.class_ids();
    for c in &encountered {
        if !test.labels().contains(c) {
            return Err(Error::State(format!("no test samples for class {c}")));
        }
    }
    let test = test.filter_classes(&encountered);
    let e = embed(params, &test.to_tensor()?)?;
    let is_base = |c: usize| base_classes.contains(&c);
    let mut all = Tally::default();
    let (mut base, mut new) = (Tally::default(), Tally::default());
    let (mut base_joint, mut new_joint) = (Tally::default(), Tally::default());
    for (i, &label) in test.labels().iter().enumerate() {
        let joint = nearest_prototype(store, e.row(i))? == label;
        let split = is_base(label);
        let within = nearest_prototype_among(store, e.row(i), |p| is_base(p.class_id) == split)? == label;
        all.add(joint);
        if split {
            base.add(within);
            base_joint.add(joint);
        } else {
            new.add(within);
            new_joint.add(joint);
        }
    }
    Ok(SessionAccuracy {
        session,
        all: all.ratio().unwrap_or(0.0),
        base: base.ratio().unwrap_or(0.0),
        new: new.ratio(),
        base_joint: base_joint.ratio().unwrap_or(0.0),
        new_joint: new_joint.ratio(),
    })
}

/// First-session accuracy minus last-session accuracy.
pub fn performance_dropping_rate(accuracies: &[f64]) -> Result<f64> {
    match accuracies {
        [first, .., last] => Ok(first - last),
        _ => Err(Error::Contract(format!(
            "dropping rate needs at least 2 sessions, got {}",
            accuracies.len()
        ))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sessions: Vec<SessionAccuracy>,
    /// Absent for single-session runs.
    pub pd: Option<f64>,
    pub grad_norm_trace: Vec<f64>,
}

impl Metrics {
    pub fn from_sessions(sessions: Vec<SessionAccuracy>) -> Self {
        let acc: Vec<f64> = sessions.iter().map(|s| s.all).collect();
        Self {
            pd: performance_dropping_rate(&acc).ok(),
            sessions,
            grad_norm_trace: Vec::new(),
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.all).collect()
    }
}
