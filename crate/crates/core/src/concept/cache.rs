use serde::{Deserialize, Serialize};

use crate::scene::ConceptId;

/// Running mean of mapped features per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiCenterCache {
    dim: usize,
    means: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl QuasiCenterCache {
    pub fn new(n_concepts: usize, dim: usize) -> Self {
        Self { dim, means: vec![vec![0.0; dim]; n_concepts], counts: vec![0; n_concepts] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `u <- (n u + x) / (n + 1)`.
    pub fn insert(&mut self, c: ConceptId, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "cache insert dimension");
        let n = self.counts[c.0] as f64;
        for (u, &v) in self.means[c.0].iter_mut().zip(x) {
            *u = (n * *u + v) / (n + 1.0);
        }
        self.counts[c.0] += 1;
    }

    pub fn count(&self, c: ConceptId) -> u64 {
        self.counts[c.0]
    }

    pub fn center(&self, c: ConceptId) -> &[f64] {
        &self.means[c.0]
    }

    pub fn is_active(&self, c: ConceptId, min_count: u64) -> bool {
        self.counts[c.0] >= min_count
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn clear(&mut self) {
        self.means.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x = 0.0));
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}
