//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes only reference
//! earlier nodes, so the recording order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. One tape serves one forward
//! pass; drop it after taking gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    SumSquares(Var),
    NegSqDist(Var, Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients for the parameters of a tape, in registration order.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Var>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.params.iter().position(|&p| p == var).map(|i| &self.grads[i])
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.grads
    }

    /// All parameter gradients concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.values().iter().copied()).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = operands(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddBias(x, bias))
    }

    /// `input · weight + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let z = self.matmul(input, weight)?;
        self.add_bias(z, bias)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(x, factor))
    }

    /// Scalar sum of squared entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumSquares(x))
    }

    /// `out[i, j] = -‖a_i − b_j‖²` for rows `a_i` of `a` and `b_j` of `b`.
    pub fn neg_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::NegSqDist(a, b))
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Re-evaluates every recorded node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |v| &out[v.0])?,
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar node; returns gradients for every param.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let tensors = self
            .params
            .iter()
            .map(|&p| {
                let shape = self.nodes[p.0].value.shape().to_vec();
                match grads.get_mut(p.0).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(Gradients {
            params: self.params.clone(),
            grads: tensors,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bv.values()[p * m + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av.values()[i * k + p];
                            for j in 0..m {
                                db[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                let m = out.cols();
                if needs(x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
                if needs(bias) {
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Relu(x) => {
                let dx = val(x)
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::SumSquares(x) => {
                let dx = val(x).values().iter().map(|v| 2.0 * v * g[0]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::NegSqDist(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (n, c, d) = (av.rows(), bv.rows(), av.cols());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; c * d];
                for i in 0..n {
                    for j in 0..c {
                        let gij = g[i * c + j];
                        for k in 0..d {
                            let diff = av.values()[i * d + k] - bv.values()[j * d + k];
                            da[i * d + k] -= 2.0 * gij * diff;
                            db[j * d + k] += 2.0 * gij * diff;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = val(logits);
                let (n, c) = (lv.rows(), lv.cols());
                let scale = g[0] / n as f64;
                let mut dl = vec![0.0; n * c];
                for (i, &label) in labels.iter().enumerate() {
                    let probs = softmax_row(lv.row(i));
                    for j in 0..c {
                        let target = if j == label { 1.0 } else { 0.0 };
                        dl[i * c + j] = scale * (probs[j] - target);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

fn operands(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::NegSqDist(a, b) => vec![*a, *b],
        Op::Relu(x) | Op::Scale(x, _) | Op::SumSquares(x) => vec![*x],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

fn as_matrix_shape(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn eval<'a>(op: &Op, get: impl Fn(&Var) -> &'a Tensor) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves are not re-evaluated"),
        Op::MatMul(a, b) => matmul(get(a), get(b)),
        Op::AddBias(x, bias) => add_bias(get(x), get(bias)),
        Op::Relu(x) => Ok(relu(get(x))),
        Op::Add(a, b) => zip_same(get(a), get(b), "add", |x, y| x + y),
        Op::Sub(a, b) => zip_same(get(a), get(b), "sub", |x, y| x - y),
        Op::Scale(x, factor) => {
            let x = get(x);
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.values().iter().map(|v| v * factor).collect(),
            ))
        }
        Op::SumSquares(x) => Ok(Tensor::scalar(get(x).values().iter().map(|v| v * v).sum())),
        Op::NegSqDist(a, b) => {
            let (a, b) = (get(a), get(b));
            if a.cols() != b.cols() {
                return Err(Error::Dimension {
                    op: "neg_sq_dist",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (n, c) = (a.rows(), b.rows());
            let mut out = Vec::with_capacity(n * c);
            for i in 0..n {
                for j in 0..c {
                    out.push(-squared_euclidean(a.row(i), b.row(j))?);
                }
            }
            Ok(Tensor::from_parts(vec![n, c], out))
        }
        Op::SoftmaxCrossEntropy { logits, labels } => softmax_cross_entropy(get(logits), labels).map(Tensor::scalar),
    }
}

fn zip_same(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = as_matrix_shape(a);
    let (k2, m) = as_matrix_shape(b);
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a.values()[i * k + p];
            let brow = &b.values()[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || bias.rank() != 1 || bias.len() != x.cols() {
        return Err(Error::Dimension {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = x.values().to_vec();
    for row in out.chunks_mut(x.cols()) {
        row.iter_mut().zip(bias.values()).for_each(|(o, b)| *o += b);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Eager matrix product, identical in arithmetic to the taped version.
pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, b)
}

/// `input[n×d_in] · weight[d_in×d_out] + bias[d_out]`, evaluated eagerly.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    add_bias(&matmul(input, weight)?, bias)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
}

/// Mean over rows of `-log softmax(logits)[label]`, stabilized by the row max.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Index { index: label, bound: c });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / n as f64)
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "squared_euclidean",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Central-difference gradient of `loss` at `params` with step `h`.
pub fn finite_difference_gradient<F>(loss: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = loss(&probe);
            probe[i] = orig - h;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise error, relative where `|expected| ≥ floor` and
/// absolute otherwise.
pub fn max_relative_error(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| {
            let diff = (a - e).abs();
            if e.abs() < floor && a.abs() < floor {
                diff
            } else {
                diff / e.abs().max(a.abs())
            }
        })
        .fold(0.0, f64::max)
}
