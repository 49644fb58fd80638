use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SessionSpec};
use crate::error::{Error, Result};
use crate::proto::BASE_SESSION;

/// Gaussian class clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub base_classes: usize,
    pub input_dim: usize,
    /// Typical distance between two class means.
    pub separation: f64,
    /// Within-class standard deviation per coordinate.
    pub std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            base_classes: 12,
            input_dim: 16,
            separation: 6.0,
            std: 1.0,
            train_per_class: 60,
            test_per_class: 40,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("classes", "must be at least 1"));
        }
        if self.base_classes > self.classes {
            return Err(Error::config(
                "base_classes",
                format!("{} exceeds the {} classes", self.base_classes, self.classes),
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::config("separation", "must be positive"));
        }
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(Error::config("std", "must be non-negative"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config(
                "train_per_class",
                "train and test sizes must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Class means of the synthetic problem: random directions scaled so that two
/// orthogonal means sit `separation` apart.
pub fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = spec.separation / std::f64::consts::SQRT_2;
    (0..spec.classes)
        .map(|_| {
            let g: Vec<f64> = (0..spec.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            g.into_iter().map(|v| radius * v / norm).collect()
        })
        .collect()
}

/// Train and test sets drawn independently around shared class means.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let means = class_means(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut draw = |per_class: usize| -> Result<Dataset> {
        let mut ds = Dataset::empty(spec.input_dim);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                let x: Vec<f64> = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + spec.std * z
                    })
                    .collect();
                ds.push(class, &x)?;
            }
        }
        Ok(ds)
    };
    let train = draw(spec.train_per_class)?;
    let test = draw(spec.test_per_class)?;
    Ok((train, test))
}

/// Base session with all training data of `base_classes` randomly chosen
/// classes, followed by `way`-way `shot`-shot sessions over the rest.
pub fn split_sessions(
    data: &Dataset,
    base_classes: usize,
    way: usize,
    shot: usize,
    seed: u64,
) -> Result<Vec<SessionSpec>> {
    let mut classes = data.classes();
    if base_classes < 2 {
        return Err(Error::config("base_classes", "need at least 2 base classes"));
    }
    if way == 0 || shot == 0 {
        return Err(Error::config("way", "way and shot must be at least 1"));
    }
    if classes.len() < base_classes + way {
        return Err(Error::config(
            "base_classes",
            format!(
                "{} classes cannot fill {} base classes plus one {}-way session",
                classes.len(),
                base_classes,
                way
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    let incremental = (classes.len() - base_classes) / way;

    let mut base: Vec<usize> = classes[..base_classes].to_vec();
    base.sort_unstable();
    let mut sessions = vec![SessionSpec {
        index: BASE_SESSION,
        train: data.filter_classes(&base),
        way: base.len(),
        shot: 0,
        classes: base,
    }];

    for s in 0..incremental {
        let start = base_classes + s * way;
        let mut session_classes = classes[start..start + way].to_vec();
        session_classes.sort_unstable();
        let mut picked = Vec::with_capacity(way * shot);
        for &c in &session_classes {
            let idx = data.indices_of(c);
            if idx.len() < shot {
                return Err(Error::config(
                    "shot",
                    format!("class {c} has {} samples, fewer than {shot}", idx.len()),
                ));
            }
            let mut chosen: Vec<usize> = sample(&mut rng, idx.len(), shot).into_iter().map(|j| idx[j]).collect();
            chosen.sort_unstable();
            picked.extend(chosen);
        }
        sessions.push(SessionSpec {
            index: BASE_SESSION + 1 + s,
            train: data.subset(&picked),
            classes: session_classes,
            way,
            shot,
        });
    }
    Ok(sessions)
}
