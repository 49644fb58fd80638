mod common;

use std::collections::BTreeMap;

use f2m::analysis::{performance_dropping_rate, session_accuracy};
use f2m::data::Dataset;
use f2m::net::{embed, ParamSet};
use f2m::proto::PrototypeStore;
use f2m::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn plain_training_is_bit_identical_to_reference_sgd() {
    let (steps, identical) = common::reference::plain_training_matches_reference();
    assert_eq!(steps, 100);
    assert!(identical);
}

#[test]
fn ncm_matches_brute_force_argmin() {
    let (wrong, ties) = common::reference::ncm_disagreements(10_000, 77);
    assert!(wrong.is_empty(), "mismatching cases {wrong:?}");
    assert!(ties > 500, "only {ties} tied instances");
}

struct Expected {
    all: f64,
    base: f64,
    new: Option<f64>,
    base_joint: f64,
    new_joint: Option<f64>,
}

fn brute_accuracy(params: &ParamSet, list: &[(usize, Vec<f64>)], test: &Dataset, base_classes: &[usize]) -> Expected {
    let e = embed(params, &test.to_tensor().unwrap()).unwrap();
    let known: Vec<usize> = list.iter().map(|(c, _)| *c).collect();
    let is_base = |c: usize| base_classes.contains(&c);
    let (mut all, mut n_all) = (0, 0);
    let (mut base, mut base_joint, mut n_base) = (0, 0, 0);
    let (mut new, mut new_joint, mut n_new) = (0, 0, 0);
    for (i, &y) in test.labels().iter().enumerate() {
        if !known.contains(&y) {
            continue;
        }
        let joint = common::reference::brute_nearest(list, e.row(i)) == y;
        let same: Vec<(usize, Vec<f64>)> = list
            .iter()
            .filter(|(c, _)| is_base(*c) == is_base(y))
            .cloned()
            .collect();
        let within = common::reference::brute_nearest(&same, e.row(i)) == y;
        n_all += 1;
        all += joint as usize;
        if is_base(y) {
            n_base += 1;
            base += within as usize;
            base_joint += joint as usize;
        } else {
            n_new += 1;
            new += within as usize;
            new_joint += joint as usize;
        }
    }
    let ratio = |a: usize, n: usize| a as f64 / n as f64;
    Expected {
        all: ratio(all, n_all),
        base: ratio(base, n_base),
        new: (n_new > 0).then(|| ratio(new, n_new)),
        base_joint: ratio(base_joint, n_base),
        new_joint: (n_new > 0).then(|| ratio(new_joint, n_new)),
    }
}

#[test]
fn session_accuracy_matches_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let classes = r.random_range(3..8);
        let base_count = r.random_range(2..classes);
        let dim = 3;
        let params = common::small_net(case, dim, &[4], 2, classes);
        let test = {
            let mut rows = Vec::new();
            for c in 0..classes {
                for _ in 0..r.random_range(1..6) {
                    rows.push((c, (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()));
                }
            }
            Dataset::from_rows(&rows).unwrap()
        };
        let seen = r.random_range(base_count..=classes);
        let mut store = PrototypeStore::new();
        let mut list = Vec::new();
        for c in 0..seen {
            let v: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            let session = if c < base_count { 1 } else { 2 };
            store.insert_all(BTreeMap::from([(c, v.clone())]), session).unwrap();
            list.push((c, v));
        }
        let base_classes: Vec<usize> = (0..base_count).collect();
        let got = session_accuracy(&params, &store, &test, &base_classes, 2).unwrap();
        let want = brute_accuracy(&params, &list, &test, &base_classes);
        assert_eq!(got.all, want.all, "case {case}");
        assert_eq!(got.base, want.base, "case {case}");
        assert_eq!(got.new, want.new, "case {case}");
        assert_eq!(got.base_joint, want.base_joint, "case {case}");
        assert_eq!(got.new_joint, want.new_joint, "case {case}");
    }
}

#[test]
fn session_accuracy_hand_case() {
    let params = common::small_net(0, 2, &[2], 2, 3);
    let mut theta = vec![0.0; params.len()];
    for spec in params.specs() {
        if spec.name.ends_with(".weight") && spec.shape == vec![2, 2] {
            let r = spec.range();
            theta[r.start] = 1.0;
            theta[r.start + 3] = 1.0;
        }
    }
    let params = params.unflatten(&theta).unwrap();
    let test = Dataset::from_rows(&[
        (0, vec![1.0, 0.0]),
        (0, vec![0.6, 0.45]),
        (1, vec![0.0, 1.0]),
        (1, vec![0.9, 0.1]),
        (2, vec![0.5, 0.5]),
    ])
    .unwrap();
    let mut store = PrototypeStore::new();
    store
        .insert_all(BTreeMap::from([(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]), 1)
        .unwrap();
    let acc = session_accuracy(&params, &store, &test, &[0, 1], 1).unwrap();
    assert_eq!(acc.all, 0.75);
    assert_eq!(acc.base, 0.75);
    assert_eq!(acc.new, None);

    store.insert_all(BTreeMap::from([(2, vec![0.5, 0.5])]), 2).unwrap();
    let acc = session_accuracy(&params, &store, &test, &[0, 1], 2).unwrap();
    assert_eq!(acc.all, 0.6);
    assert_eq!(acc.base, 0.75);
    assert_eq!(acc.base_joint, 0.5);
    assert_eq!(acc.new, Some(1.0));

    let swapped = session_accuracy(&params, &store, &test, &[2], 2).unwrap();
    assert_eq!(swapped.all, acc.all);
    assert_eq!(swapped.base, 1.0);
    assert_eq!(swapped.new, Some(0.75));
    assert_eq!(swapped.new_joint, Some(0.5));
}

#[test]
fn dropping_rate_of_published_rows() {
    let full = [64.71, 61.99, 58.99, 55.58, 52.55, 49.96, 48.08, 46.28, 44.67];
    let naive = [65.18, 60.83, 53.13, 43.57, 23.75, 10.76, 8.26, 7.24, 6.45];
    let two_places = |v: f64| (v * 100.0).round() / 100.0;
    assert_eq!(two_places(performance_dropping_rate(&full).unwrap()), 20.04);
    assert_eq!(two_places(performance_dropping_rate(&naive).unwrap()), 58.73);
    assert!(performance_dropping_rate(&[1.0]).is_err());
}

#[test]
fn tensor_round_trip_of_store_matrix() {
    let mut store = PrototypeStore::new();
    store
        .insert_all(BTreeMap::from([(3, vec![1.0, 2.0]), (1, vec![3.0, 4.0])]), 1)
        .unwrap();
    let (m, ids) = store.matrix().unwrap();
    assert_eq!(ids, [1, 3]);
    assert_eq!(m, Tensor::matrix(2, 2, vec![3.0, 4.0, 1.0, 2.0]).unwrap());
}
