//! Mapped-object exports: 2-D projections and cluster purity within one subspace.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::concept::ConceptSpace;
use crate::dataset::Dataset;
use crate::scene::{AttrId, ConceptId};

#[derive(Debug, Clone, PartialEq)]
pub struct MappedObject {
    /// `scene_id:index`.
    pub object_id: String,
    pub concept: ConceptId,
    pub mapped: Vec<f64>,
}

/// Every object of `data` mapped into subspace `attr`.
pub fn map_objects(space: &ConceptSpace, data: &Dataset, attr: AttrId) -> Vec<MappedObject> {
    data.scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().enumerate().map(move |(i, o)| MappedObject {
                object_id: format!("{}:{i}", s.scene_id),
                concept: o.value(attr),
                mapped: space.map_feature(&o.feature, attr),
            })
        })
        .collect()
}

/// Projection onto the top two principal components of `points`.
/// Each component's sign is fixed so its largest loading is positive.
pub fn pca2(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    if points.is_empty() {
        return vec![];
    }
    let (n, d) = (points.len(), points[0].len());
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let comps: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                v.into_iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    let proj = |row: usize, c: usize| comps.get(c).map_or(0.0, |v| (0..d).map(|j| x[(row, j)] * v[j]).sum());
    (0..n).map(|i| [proj(i, 0), proj(i, 1)]).collect()
}

/// Mean mapped point per true concept.
pub fn class_means(objects: &[MappedObject]) -> Vec<(ConceptId, Vec<f64>)> {
    let mut acc: BTreeMap<ConceptId, (Vec<f64>, usize)> = BTreeMap::new();
    for o in objects {
        let e = acc.entry(o.concept).or_insert_with(|| (vec![0.0; o.mapped.len()], 0));
        e.0.iter_mut().zip(&o.mapped).for_each(|(a, x)| *a += x);
        e.1 += 1;
    }
    acc.into_iter().map(|(c, (s, n))| (c, s.into_iter().map(|x| x / n as f64).collect())).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center for each object.
pub fn assign(objects: &[MappedObject], centers: &[(ConceptId, Vec<f64>)]) -> Vec<usize> {
    objects
        .iter()
        .map(|o| {
            (0..centers.len())
                .min_by(|&a, &b| sq_dist(&o.mapped, &centers[a].1).total_cmp(&sq_dist(&o.mapped, &centers[b].1)))
                .expect("at least one center")
        })
        .collect()
}

/// Majority-label purity of the nearest-center partition.
pub fn purity(objects: &[MappedObject], centers: &[(ConceptId, Vec<f64>)]) -> f64 {
    if objects.is_empty() {
        return 0.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<ConceptId, usize>> = BTreeMap::new();
    for (o, k) in objects.iter().zip(assign(objects, centers)) {
        *table.entry(k).or_default().entry(o.concept).or_default() += 1;
    }
    table.values().map(|t| t.values().max().copied().unwrap_or(0)).sum::<usize>() as f64 / objects.len() as f64
}

/// Quasi-centers of the learner's cache for `attr`, where populated.
pub fn cache_centers(space: &ConceptSpace, attr: AttrId) -> Vec<(ConceptId, Vec<f64>)> {
    space.schema().vocab(attr).into_iter().filter(|&c| space.cache.count(c) > 0).map(|c| (c, space.cache.center(c).to_vec())).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub superordinate: String,
    pub objects: usize,
    pub centers: String,
    pub purity: f64,
}

/// CSV with `object_id,true_concept[,m0..],pc1,pc2`.
pub fn export_csv(space: &ConceptSpace, objects: &[MappedObject], with_mapped: bool) -> String {
    let pcs = pca2(&objects.iter().map(|o| o.mapped.clone()).collect::<Vec<_>>());
    let mut out = String::from("object_id,true_concept");
    if with_mapped {
        for j in 0..space.subspace_dim() {
            let _ = write!(out, ",m{j}");
        }
    }
    out.push_str(",pc1,pc2\n");
    for (o, pc) in objects.iter().zip(pcs) {
        let _ = write!(out, "{},{}", o.object_id, space.schema().concept_name(o.concept));
        if with_mapped {
            for x in &o.mapped {
                let _ = write!(out, ",{x}");
            }
        }
        let _ = writeln!(out, ",{},{}", pc[0], pc[1]);
    }
    out
}
