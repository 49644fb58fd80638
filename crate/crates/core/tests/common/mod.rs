#![allow(dead_code)]

use f2m::net::{init_network, NetworkConfig, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod reference;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_net(seed: u64, input: usize, hidden: &[usize], emb: usize, classes: usize) -> ParamSet {
    init_network(&NetworkConfig {
        input_dim: input,
        hidden: hidden.to_vec(),
        embedding_dim: emb,
        class_count: classes,
        noise_last_k: 2.min(hidden.len() + 1),
        noise_biases: true,
        seed,
    })
    .unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

/// Weight and bias blocks of a parameter vector, in layer order.
fn layers(params: &ParamSet, theta: &[f64]) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    params
        .specs()
        .chunks(2)
        .map(|pair| {
            let (w, b) = (&pair[0], &pair[1]);
            let (rows, cols) = (w.shape[0], w.shape[1]);
            let wv = &theta[w.range()];
            let weight = (0..rows).map(|r| wv[r * cols..(r + 1) * cols].to_vec()).collect();
            (weight, theta[b.range()].to_vec())
        })
        .collect()
}

fn affine(h: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|j| {
            let mut s = 0.0;
            for (p, hp) in h.iter().enumerate() {
                s += hp * w[p][j];
            }
            s + b[j]
        })
        .collect()
}

/// Embedding of one row plus the smallest |pre-activation| met on the way.
pub fn ref_embed_row(params: &ParamSet, theta: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
    let all = layers(params, theta);
    let embed_layers = all.len() - 1;
    let mut h = x.to_vec();
    let mut margin = f64::INFINITY;
    for (l, (w, b)) in all[..embed_layers].iter().enumerate() {
        let pre = affine(&h, w, b);
        if l + 1 < embed_layers {
            margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
            h = pre.into_iter().map(|v| v.max(0.0)).collect();
        } else {
            h = pre;
        }
    }
    (h, margin)
}

pub fn ref_logits_row(params: &ParamSet, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let all = layers(params, theta);
    let (e, _) = ref_embed_row(params, theta, x);
    let (w, b) = all.last().unwrap();
    affine(&e, w, b)
}

pub fn ref_margin(params: &ParamSet, theta: &[f64], xs: &[Vec<f64>]) -> f64 {
    xs.iter()
        .map(|x| ref_embed_row(params, theta, x).1)
        .fold(f64::INFINITY, f64::min)
}

fn nll(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[label]
}

pub fn ref_cross_entropy(params: &ParamSet, theta: &[f64], xs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(labels)
        .map(|(x, &y)| nll(&ref_logits_row(params, theta, x), y))
        .sum();
    total / xs.len() as f64
}

fn class_mean(params: &ParamSet, theta: &[f64], xs: &[Vec<f64>], labels: &[usize], c: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = xs
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == c)
        .map(|(x, _)| ref_embed_row(params, theta, x).0)
        .collect();
    let d = rows[0].len();
    (0..d)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// CE at `θ + ε` plus `λ/|C| Σ_c ‖p_c(θ + ε) − p_c(θ)‖²` over the batch classes.
pub fn ref_base_loss(
    params: &ParamSet,
    theta: &[f64],
    noise: &[f64],
    xs: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
) -> f64 {
    let noisy: Vec<f64> = theta.iter().zip(noise).map(|(t, e)| t + e).collect();
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut penalty = 0.0;
    for &c in &classes {
        let a = class_mean(params, &noisy, xs, labels, c);
        let b = class_mean(params, theta, xs, labels, c);
        penalty += a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    }
    ref_cross_entropy(params, &noisy, xs, labels) + lambda / classes.len() as f64 * penalty
}

/// Mean of `−log softmax(−‖e − p‖²)[y]` with prototypes listed in class order.
pub fn ref_metric_loss(
    params: &ParamSet,
    theta: &[f64],
    xs: &[Vec<f64>],
    rows: &[usize],
    prototypes: &[Vec<f64>],
) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(rows)
        .map(|(x, &r)| {
            let (e, _) = ref_embed_row(params, theta, x);
            let scores: Vec<f64> = prototypes
                .iter()
                .map(|p| -e.iter().zip(p).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
                .collect();
            nll(&scores, r)
        })
        .sum();
    total / xs.len() as f64
}

/// Five-point central difference.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut p = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let t = p[i];
            let mut at = |d: f64| {
                p[i] = t + d;
                let v = f(&p);
                p[i] = t;
                v
            };
            let (f2, f1, b1, b2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * h)
        })
        .collect()
}

/// Passes when every component agrees to `rel` relative, or to `floor`
/// absolute when both sides are below `floor`.
pub fn worst_violation(actual: &[f64], expected: &[f64], rel: f64, floor: f64) -> f64 {
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| {
            let diff = (a - e).abs();
            let scale = a.abs().max(e.abs());
            if scale < floor {
                diff / floor
            } else {
                diff / (rel * scale)
            }
        })
        .fold(0.0, f64::max)
}

/// Paired sign test: successes out of trials.
pub fn count(flags: impl IntoIterator<Item = bool>) -> usize {
    flags.into_iter().filter(|&b| b).count()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Base,
    Metric,
}

/// Worst normalized gradient error over `count` random instances of `kind`;
/// values at or below 1 meet `rel` relative with a `floor` absolute floor.
pub fn gradient_check(kind: LossKind, count: usize, seed: u64, rel: f64, floor: f64) -> f64 {
    use f2m::proto::PrototypeStore;
    use f2m::tensor::Tensor;
    use f2m::train::{BaseObjective, MetricObjective, NoisyObjective};
    use std::collections::BTreeMap;

    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < count {
        let input = r.random_range(2..5);
        let hidden: Vec<usize> = (0..r.random_range(1..3)).map(|_| r.random_range(3..6)).collect();
        let emb = r.random_range(2..4);
        let classes = r.random_range(2..5);
        let params = small_net(r.random(), input, &hidden, emb, classes);
        let n = classes + r.random_range(1..5);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let xs = random_rows(&mut r, n, input);
        let theta = params.values().to_vec();
        let mask = params.eligible_mask();
        let noise: Vec<f64> = mask
            .iter()
            .map(|&m| if m { r.random_range(-0.05..0.05) } else { 0.0 })
            .collect();
        let noisy: Vec<f64> = theta.iter().zip(&noise).map(|(t, e)| t + e).collect();
        if ref_margin(&params, &theta, &xs).min(ref_margin(&params, &noisy, &xs)) < 3e-2 {
            continue;
        }
        let x = Tensor::from_rows(&xs).unwrap();
        let (analytic, numeric) = match kind {
            LossKind::CrossEntropy => {
                let obj = BaseObjective::at(&params, &x, &labels, 0.0).unwrap();
                let g = obj.noisy_loss_grad(&theta, &vec![0.0; theta.len()]).unwrap().1;
                let fd = central_gradient(|t| ref_cross_entropy(&params, t, &xs, &labels), &theta, 1e-3);
                (g, fd)
            }
            LossKind::Base => {
                let lambda = r.random_range(0.5..2.0);
                let obj = BaseObjective::at(&params, &x, &labels, lambda).unwrap();
                let g = obj.noisy_loss_grad(&theta, &noise).unwrap().1;
                let fd = central_gradient(
                    |t| ref_base_loss(&params, t, &noise, &xs, &labels, lambda),
                    &theta,
                    1e-3,
                );
                (g, fd)
            }
            LossKind::Metric => {
                let protos: Vec<Vec<f64>> = random_rows(&mut r, classes, emb);
                let mut store = PrototypeStore::new();
                store
                    .insert_all(protos.iter().cloned().enumerate().collect::<BTreeMap<_, _>>(), 1)
                    .unwrap();
                let rows: Vec<(usize, Vec<f64>)> = labels.iter().copied().zip(xs.iter().cloned()).collect();
                let batch = f2m::data::Dataset::from_rows(&rows).unwrap();
                let obj = MetricObjective::new(&params, &store, &batch).unwrap();
                let g = obj.loss_grad(&theta).unwrap().1;
                let fd = central_gradient(|t| ref_metric_loss(&params, t, &xs, &labels, &protos), &theta, 1e-3);
                (g, fd)
            }
        };
        worst = worst.max(worst_violation(&analytic, &numeric, rel, floor));
        done += 1;
    }
    worst
}

/// Flatness of `L(θ) = θ²` at `θ = 0` under `U[−b, b]` noise: the indicator
/// and its Monte-Carlo standard error, plus the exact value `b⁴/5`.
pub fn quadratic_flatness(n: usize, b: f64, seed: u64) -> (f64, f64, f64) {
    let mut sampler = f2m::train::NoiseSampler::new(b, seed, vec![true]).unwrap();
    let report = f2m::analysis::probe_flatness(&mut sampler, b, n, "toy", |e| Ok(e.0[0] * e.0[0])).unwrap();
    let sd = 4.0 * b.powi(4) / 15.0;
    (report.indicator, sd / (n as f64).sqrt(), b.powi(4) / 5.0)
}

/// Quadratic convergence run with the stated schedule and noise bound.
pub fn quadratic_convergence(steps: usize, alpha0: f64, decay: f64, b: f64) -> f2m::commands::ConvergenceReport {
    let mut config = f2m::config::RunConfig::default();
    config.convergence.problem = f2m::config::Problem::Quadratic;
    config.convergence.steps = steps;
    config.convergence.alpha0 = alpha0;
    config.convergence.decay = decay;
    config.train.noise.bound = b;
    f2m::commands::convergence_trace(&config).unwrap()
}

/// A scaled-down benchmark that trains in well under a second.
pub fn tiny_experiment() -> f2m::bench::ExperimentConfig {
    let mut c = f2m::bench::ExperimentConfig::default();
    c.data.synthetic.classes = 10;
    c.data.synthetic.base_classes = 6;
    c.data.synthetic.input_dim = 8;
    c.data.synthetic.train_per_class = 30;
    c.data.synthetic.test_per_class = 20;
    c.network.hidden = vec![16];
    c.network.embedding_dim = 4;
    c.train.base_epochs = 12;
    c.train.batch_size = 32;
    c.flatness_samples = 0;
    c
}

pub fn tiny_run_config(out: &std::path::Path) -> f2m::config::RunConfig {
    let e = tiny_experiment();
    let mut c = f2m::config::RunConfig {
        out: out.to_path_buf(),
        network: e.network,
        train: e.train,
        data: e.data,
        ..Default::default()
    };
    c.flatness.samples = 50;
    c.sweep.bounds = vec![0.005, 0.02];
    c.convergence.steps = 40;
    c
}
