//! Least-squares linear probes on raw object features.
//!
//! Used to check that attributes are linearly decodable and to calibrate how
//! far a perturbation moves an attribute's appearance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::scene::{scene_rng, AttrId, ConceptId, Perturbation, Universe};

/// One-vs-rest least-squares classifier with a bias column.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `(dim + 1) x classes`.
    weights: DMatrix<f64>,
}

impl LinearProbe {
    /// Fits one-hot targets by ridge-regularized least squares.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, ridge: f64) -> Self {
        assert_eq!(features.len(), labels.len(), "one label per feature");
        assert!(!features.is_empty(), "probe needs data");
        let d = features[0].len() + 1;
        let x = DMatrix::from_fn(features.len(), d, |i, j| if j + 1 == d { 1.0 } else { features[i][j] });
        let y = DMatrix::from_fn(labels.len(), classes, |i, k| if labels[i] == k { 1.0 } else { 0.0 });
        let mut gram = x.transpose() * &x;
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let rhs = x.transpose() * y;
        let weights =
            gram.clone().cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| gram.svd(true, true).solve(&rhs, 1e-12).expect("svd solve"));
        Self { weights }
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let d = self.weights.nrows();
        let mut v = DVector::from_element(d, 1.0);
        v.rows_mut(0, d - 1).copy_from_slice(feature);
        let scores = self.weights.transpose() * v;
        scores.argmax().0
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Probe accuracy on clean and perturbed objects of one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeDrop {
    pub clean: f64,
    pub perturbed: f64,
}

impl ProbeDrop {
    pub fn drop(&self) -> f64 {
        self.clean - self.perturbed
    }
}

fn random_objects(universe: &Universe, n: usize, seed: u64, stream: u64) -> Vec<(Vec<ConceptId>, u64)> {
    let mut rng = scene_rng(seed, stream);
    (0..n)
        .map(|_| {
            let attrs = universe
                .schema
                .attributes()
                .map(|a| {
                    let v = universe.schema.vocab(a);
                    v[rng.random_range(0..v.len())]
                })
                .collect();
            (attrs, rng.random())
        })
        .collect()
}

/// Trains a probe for `attr` on `n_train` clean objects and tests it on
/// `n_test` fresh objects, clean and perturbed by `rho`.
pub fn probe_drop(universe: &Universe, attr: AttrId, rho: f64, n_train: usize, n_test: usize, seed: u64) -> ProbeDrop {
    let schema = &universe.schema;
    let label = |attrs: &[ConceptId]| schema.local_index(attrs[attr.0]);
    let train = random_objects(universe, n_train, seed, 0);
    let xs: Vec<Vec<f64>> = train.iter().map(|(a, s)| universe.synthesize(a, &[], *s)).collect();
    let ys: Vec<usize> = train.iter().map(|(a, _)| label(a)).collect();
    let probe = LinearProbe::fit(&xs, &ys, schema.vocab_size(attr), 1e-6);
    let test = random_objects(universe, n_test, seed, 1);
    let ys: Vec<usize> = test.iter().map(|(a, _)| label(a)).collect();
    let clean: Vec<Vec<f64>> = test.iter().map(|(a, s)| universe.synthesize(a, &[], *s)).collect();
    let pert = [Perturbation { attr, rho }];
    let shifted: Vec<Vec<f64>> = test.iter().map(|(a, s)| universe.synthesize(a, &pert, *s)).collect();
    ProbeDrop { clean: probe.accuracy(&clean, &ys), perturbed: probe.accuracy(&shifted, &ys) }
}
