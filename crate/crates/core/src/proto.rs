//! Class prototypes, nearest-class-mean classification and exemplar storage.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::squared_euclidean;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{embed, ParamSet};
use crate::tensor::Tensor;

/// Session index of the base session.
pub const BASE_SESSION: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
    pub source_session: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    New,
}

impl Split {
    pub fn contains(self, session: usize) -> bool {
        match self {
            Split::Base => session == BASE_SESSION,
            Split::New => session != BASE_SESSION,
        }
    }
}

/// Saved prototypes keyed by class id, plus the shared target norm once fixed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    prototypes: BTreeMap<usize, Prototype>,
    target_norm: Option<f64>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn target_norm(&self) -> Option<f64> {
        self.target_norm
    }

    pub fn set_target_norm(&mut self, norm: f64) -> Result<()> {
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::config("target_norm", "must be positive and finite"));
        }
        self.target_norm = Some(norm);
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Option<&Prototype> {
        self.prototypes.get(&class_id)
    }

    pub fn contains(&self, class_id: usize) -> bool {
        self.prototypes.contains_key(&class_id)
    }

    /// Prototypes in ascending class id order.
    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.prototypes.values()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.prototypes.keys().copied().collect()
    }

    /// Inserts a prototype for a class not yet present.
    pub fn insert(&mut self, proto: Prototype) -> Result<()> {
        if self.prototypes.contains_key(&proto.class_id) {
            return Err(Error::Protocol(format!(
                "class {} already has a saved prototype",
                proto.class_id
            )));
        }
        if let Some(pos) = proto.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        if let Some(existing) = self.prototypes.values().next() {
            if existing.vector.len() != proto.vector.len() {
                return Err(Error::Dimension {
                    op: "prototype insert",
                    left: vec![existing.vector.len()],
                    right: vec![proto.vector.len()],
                });
            }
        }
        self.prototypes.insert(proto.class_id, proto);
        Ok(())
    }

    pub fn insert_all(&mut self, vectors: BTreeMap<usize, Vec<f64>>, session: usize) -> Result<()> {
        for (class_id, vector) in vectors {
            self.insert(Prototype {
                class_id,
                vector,
                source_session: session,
            })?;
        }
        Ok(())
    }

    /// Prototype matrix (rows in ascending class id order) and the class ids.
    pub fn matrix(&self) -> Result<(Tensor, Vec<usize>)> {
        if self.is_empty() {
            return Err(Error::State("prototype store is empty".into()));
        }
        let rows: Vec<Vec<f64>> = self.iter().map(|p| p.vector.clone()).collect();
        Ok((Tensor::from_rows(&rows)?, self.class_ids()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean embedding of each requested class over the batch.
pub fn compute_prototypes(
    params: &ParamSet,
    samples: &Dataset,
    classes: &[usize],
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let out = BTreeMap::new();
    if classes.is_empty() {
        return Ok(out);
    }
    for &c in classes {
        if !samples.labels().contains(&c) {
            return Err(Error::EmptyClass(c));
        }
    }
    let embeddings = embed(params, &samples.to_tensor()?)?;
    Ok(class_means(&embeddings, samples.labels(), classes))
}

/// Per-class row means of `rows`; every class must occur in `labels`.
pub fn class_means(rows: &Tensor, labels: &[usize], classes: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let d = rows.cols();
    let mut out = BTreeMap::new();
    for &c in classes {
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == c) {
            sum.iter_mut().zip(rows.row(i)).for_each(|(s, v)| *s += v);
            count += 1;
        }
        sum.iter_mut().for_each(|s| *s /= count as f64);
        out.insert(c, sum);
    }
    out
}

/// Class of the nearest prototype; ties go to the smallest class id.
pub fn nearest_prototype(store: &PrototypeStore, embedding: &[f64]) -> Result<usize> {
    nearest_in(store.iter(), embedding)
}

/// Nearest prototype among those whose class passes `keep`.
pub fn nearest_prototype_among(
    store: &PrototypeStore,
    embedding: &[f64],
    keep: impl Fn(&Prototype) -> bool,
) -> Result<usize> {
    nearest_in(store.iter().filter(|p| keep(p)), embedding)
}

fn nearest_in<'a>(protos: impl Iterator<Item = &'a Prototype>, embedding: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for p in protos {
        let d = squared_euclidean(&p.vector, embedding)?;
        match best {
            Some((class, bd)) if d > bd || (d == bd && class < p.class_id) => {}
            _ => best = Some((p.class_id, d)),
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::State("prototype store is empty".into()))
}

/// NCM decision for a single input.
pub fn ncm_classify(store: &PrototypeStore, params: &ParamSet, x: &[f64]) -> Result<usize> {
    if store.is_empty() {
        return Err(Error::State("prototype store is empty".into()));
    }
    let e = embed(params, &Tensor::matrix(1, x.len(), x.to_vec())?)?;
    nearest_prototype(store, e.values())
}

/// NCM decisions for every sample of a dataset.
pub fn ncm_predict(store: &PrototypeStore, params: &ParamSet, data: &Dataset) -> Result<Vec<usize>> {
    if store.is_empty() {
        return Err(Error::State("prototype store is empty".into()));
    }
    let e = embed(params, &data.to_tensor()?)?;
    (0..data.len()).map(|i| nearest_prototype(store, e.row(i))).collect()
}

/// Rescales every prototype to the store's target norm, fixing that norm to
/// the mean base-prototype norm on first use.
pub fn normalize_prototypes(store: &mut PrototypeStore) -> Result<()> {
    for p in store.iter() {
        if l2_norm(&p.vector) == 0.0 {
            return Err(Error::DegeneratePrototype(p.class_id));
        }
    }
    let target = match store.target_norm {
        Some(t) => t,
        None => {
            let (mean, _) = prototype_norm_stats(store, Split::Base)?;
            store.target_norm = Some(mean);
            mean
        }
    };
    for p in store.prototypes.values_mut() {
        let scale = target / l2_norm(&p.vector);
        p.vector.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(())
}

/// Mean and population standard deviation of prototype norms in a split.
pub fn prototype_norm_stats(store: &PrototypeStore, split: Split) -> Result<(f64, f64)> {
    let norms: Vec<f64> = store
        .iter()
        .filter(|p| split.contains(p.source_session))
        .map(|p| l2_norm(&p.vector))
        .collect();
    if norms.is_empty() {
        return Err(Error::State(format!("no {split:?} prototypes in the store")));
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Uniformly picks `min(k_ex, available)` samples per class without replacement.
pub fn select_exemplars(session_data: &Dataset, k_ex: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for class in session_data.classes() {
        let idx = session_data.indices_of(class);
        let take = k_ex.min(idx.len());
        let mut chosen: Vec<usize> = sample(&mut rng, idx.len(), take).into_iter().map(|j| idx[j]).collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    session_data.subset(&picked)
}

/// Exemplars saved from few-shot sessions, at most `capacity` per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBuffer {
    capacity: usize,
    per_class: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ExemplarBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, class_id: usize) -> usize {
        self.per_class.get(&class_id).map_or(0, Vec::len)
    }

    /// Adds exemplars selected in `session`; base-session exemplars are refused.
    pub fn add(&mut self, session: usize, exemplars: &Dataset) -> Result<()> {
        if session == BASE_SESSION {
            return Err(Error::Protocol("base-session exemplars are not stored".into()));
        }
        for i in 0..exemplars.len() {
            let class = exemplars.labels()[i];
            let slot = self.per_class.entry(class).or_default();
            if slot.len() >= self.capacity {
                return Err(Error::Contract(format!(
                    "class {class} would exceed {} exemplars",
                    self.capacity
                )));
            }
            slot.push(exemplars.x(i).to_vec());
        }
        Ok(())
    }

    pub fn to_dataset(&self, dim: usize) -> Result<Dataset> {
        let mut ds = Dataset::empty(dim);
        for (&class, rows) in &self.per_class {
            for row in rows {
                ds.push(class, row)?;
            }
        }
        Ok(ds)
    }
}
