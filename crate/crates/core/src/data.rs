use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled samples with a fixed feature dimension, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "feature dimension must be at least 1"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: vec![labels.len(), dim],
                right: vec![features.len()],
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[(usize, Vec<f64>)]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.1.len());
        let mut features = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        for (label, row) in rows {
            if row.len() != dim {
                return Err(Error::Dimension {
                    op: "dataset row",
                    left: vec![dim],
                    right: vec![row.len()],
                });
            }
            features.extend_from_slice(row);
            labels.push(*label);
        }
        Self::new(dim, features, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, label: usize, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                op: "dataset push",
                left: vec![self.dim],
                right: vec![x.len()],
            });
        }
        self.features.extend_from_slice(x);
        self.labels.push(label);
        Ok(())
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.x(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            features,
            labels,
        }
    }

    /// Samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        if other.dim != self.dim {
            return Err(Error::Dimension {
                op: "dataset extend",
                left: vec![self.dim],
                right: vec![other.dim],
            });
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Feature matrix and labels of the given rows.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let sub = self.subset(indices);
        let x = sub.to_tensor()?;
        Ok((x, sub.labels))
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::State("empty dataset has no feature matrix".into()));
        }
        Ok(Tensor::from_parts(vec![self.len(), self.dim], self.features.clone()))
    }
}

/// One training session: its class set and training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    /// 1 for the base session, 2.. for few-shot sessions.
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub way: usize,
    pub shot: usize,
}
