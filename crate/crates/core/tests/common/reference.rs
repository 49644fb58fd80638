use f2m::data::Dataset;
use f2m::net::ParamSet;
use f2m::proto::{nearest_prototype, Prototype, PrototypeStore};
use f2m::train::{train_base, Ablation, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Matrix = Vec<Vec<f64>>;

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let m = b[0].len();
    a.iter()
        .map(|row| {
            (0..m)
                .map(|j| {
                    let mut s = 0.0;
                    for (p, v) in row.iter().enumerate() {
                        s += v * b[p][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn plus_bias(a: Matrix, b: &[f64]) -> Matrix {
    a.into_iter()
        .map(|row| row.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

/// `aᵀ · g` accumulated row by row.
fn outer_grad(a: &Matrix, g: &Matrix) -> Matrix {
    let (k, m) = (a[0].len(), g[0].len());
    let mut out = vec![vec![0.0; m]; k];
    for i in 0..a.len() {
        for p in 0..k {
            for j in 0..m {
                out[p][j] += a[i][p] * g[i][j];
            }
        }
    }
    out
}

fn column_sums(g: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; g[0].len()];
    for row in g {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

/// `g · wᵀ`.
fn back_through(g: &Matrix, w: &Matrix) -> Matrix {
    g.iter()
        .map(|row| {
            (0..w.len())
                .map(|p| {
                    let mut s = 0.0;
                    for (j, v) in row.iter().enumerate() {
                        s += v * w[p][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Plain minibatch SGD on cross-entropy for an MLP with ReLU hidden layers,
/// a linear embedding layer and a linear head.
pub struct ReferenceSgd {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl ReferenceSgd {
    pub fn from_params(p: &ParamSet) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in p.specs().chunks(2) {
            let (rows, cols) = (pair[0].shape[0], pair[0].shape[1]);
            let w = &p.values()[pair[0].range()];
            weights.push((0..rows).map(|r| w[r * cols..(r + 1) * cols].to_vec()).collect());
            biases.push(p.values()[pair[1].range()].to_vec());
        }
        Self { weights, biases }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            w.iter().for_each(|r| out.extend(r));
            out.extend(b);
        }
        out
    }

    pub fn step(&mut self, x: &Matrix, labels: &[usize], alpha: f64) {
        let layers = self.weights.len();
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::new();
        for l in 0..layers {
            let z = plus_bias(matmul(inputs.last().unwrap(), &self.weights[l]), &self.biases[l]);
            let hidden = l + 2 < layers;
            pre.push(z.clone());
            let next = if hidden {
                z.iter()
                    .map(|r| r.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
                    .collect()
            } else {
                z
            };
            inputs.push(next);
        }
        let n = labels.len();
        let scale = 1.0 / n as f64;
        let logits = inputs.pop().unwrap();
        let mut g: Matrix = logits
            .iter()
            .zip(labels)
            .map(|(row, &y)| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.iter()
                    .enumerate()
                    .map(|(j, e)| scale * (e / total - if j == y { 1.0 } else { 0.0 }))
                    .collect()
            })
            .collect();
        let mut grads = vec![(Matrix::new(), Vec::new()); layers];
        for l in (0..layers).rev() {
            grads[l] = (outer_grad(&inputs[l], &g), column_sums(&g));
            if l == 0 {
                break;
            }
            let upstream = back_through(&g, &self.weights[l]);
            g = if l - 1 + 2 < layers {
                upstream
                    .iter()
                    .zip(&pre[l - 1])
                    .map(|(gr, zr)| {
                        gr.iter()
                            .zip(zr)
                            .map(|(&gv, &zv)| if zv > 0.0 { gv } else { 0.0 })
                            .collect()
                    })
                    .collect()
            } else {
                upstream
            };
        }
        for (l, (dw, db)) in grads.into_iter().enumerate() {
            for (row, drow) in self.weights[l].iter_mut().zip(&dw) {
                row.iter_mut().zip(drow).for_each(|(w, d)| *w -= alpha * d);
            }
            self.biases[l].iter_mut().zip(&db).for_each(|(b, d)| *b -= alpha * d);
        }
    }
}

pub fn blobs(seed: u64, classes: usize, per_class: usize, dim: usize) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            let x: Vec<f64> = (0..dim)
                .map(|k| if k % classes == c { 2.0 } else { 0.0 } + r.random_range(-1.0..1.0))
                .collect();
            rows.push((c, x));
        }
    }
    Dataset::from_rows(&rows).unwrap()
}

/// Trains the same network with the library (no noise, no penalty) and with
/// the reference loop, returning the number of steps taken and whether the
/// final parameters agree bit for bit.
pub fn plain_training_matches_reference() -> (usize, bool) {
    let data = blobs(1, 4, 10, 5);
    let params = super::small_net(2, 5, &[6], 3, 4);
    let config = TrainConfig {
        base_epochs: 20,
        base_lr: 0.1,
        lr_decay: 0.01,
        batch_size: 8,
        flags: Ablation::NONE,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut reference = ReferenceSgd::from_params(&params);
    assert_eq!(reference.flat(), params.values());
    let outcome = train_base(params, &data, &config).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..config.base_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x: Matrix = chunk.iter().map(|&i| data.x(i).to_vec()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let alpha = config.base_lr / (1.0 + config.lr_decay * step as f64);
            reference.step(&x, &labels, alpha);
            step += 1;
        }
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    (step, bits(outcome.params.values()) == bits(&reference.flat()))
}

pub fn brute_nearest(protos: &[(usize, Vec<f64>)], query: &[f64]) -> usize {
    let dist = |p: &[f64]| -> f64 { p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum() };
    let best = protos.iter().map(|(_, v)| dist(v)).fold(f64::INFINITY, f64::min);
    protos
        .iter()
        .filter(|(_, v)| dist(v) == best)
        .map(|(c, _)| *c)
        .min()
        .unwrap()
}

pub fn random_store(r: &mut ChaCha8Rng, dim: usize, lattice: bool) -> (PrototypeStore, Vec<(usize, Vec<f64>)>) {
    let count = r.random_range(1..9);
    let mut ids: Vec<usize> = (0..40).collect();
    ids.shuffle(r);
    let mut store = PrototypeStore::new();
    let mut list = Vec::new();
    for &id in &ids[..count] {
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                if lattice {
                    r.random_range(-1..=1) as f64
                } else {
                    r.random_range(-3.0..3.0)
                }
            })
            .collect();
        store
            .insert(Prototype {
                class_id: id,
                vector: v.clone(),
                source_session: 1,
            })
            .unwrap();
        list.push((id, v));
    }
    (store, list)
}

/// Compares `nearest_prototype` with the brute-force argmin on `cases` random
/// stores; every other case draws from a small integer lattice so that ties
/// are common. Returns the mismatching case indices and the number of ties.
pub fn ncm_disagreements(cases: usize, seed: u64) -> (Vec<usize>, usize) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut ties = 0;
    let mut wrong = Vec::new();
    for case in 0..cases {
        let dim = r.random_range(1..6);
        let lattice = case % 2 == 0;
        let (store, list) = random_store(&mut r, dim, lattice);
        let query: Vec<f64> = (0..dim)
            .map(|_| {
                if lattice {
                    r.random_range(-1..=1) as f64
                } else {
                    r.random_range(-3.0..3.0)
                }
            })
            .collect();
        if nearest_prototype(&store, &query).unwrap() != brute_nearest(&list, &query) {
            wrong.push(case);
        }
        let dist = |p: &[f64]| -> f64 { p.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum() };
        let best = list.iter().map(|(_, v)| dist(v)).fold(f64::INFINITY, f64::min);
        ties += (list.iter().filter(|(_, v)| dist(v) == best).count() > 1) as usize;
    }
    (wrong, ties)
}
