//! Learner parameters and the judgment rules built on them.
//!
//! Every attribute of the schema owns a subspace: a linear map from object
//! features into 64 dimensions plus one embedding per concept. Each concept
//! also carries prior logits over subspaces. Training first learns which
//! subspace a concept belongs to (mixture judgment), then the assignment is
//! frozen and judgments become a softmax over the assigned vocabulary.
//!
//! Shortcut heads map the embedding of one attribute's value to a
//! distribution over another attribute's vocabulary. Their tables expose
//! dataset bias and are subtracted at inference time.

mod cache;
mod judge;
mod shortcut;

use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::QuasiCenterCache;
pub use judge::{clustered_log_prob, debias_rule, mixture_prob, sigmoid, super_distribution_from_cos, JudgeMode, Judgment, LearnerJudge};
pub use shortcut::{HeadTable, ShortcutJudge};

use crate::executor::ExecError;
use crate::scene::{AttrId, AttributeSchema, ConceptId};
use crate::tensor::{ParamId, ParamStore, StoredTensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("hierarchy is not frozen")]
    NotFrozen,
    #[error("hierarchy is already frozen")]
    AlreadyFrozen,
    #[error("hierarchy freeze aborted: {ambiguous} of {total} concepts are tied or low-margin ({detail})")]
    FreezeAborted { ambiguous: usize, total: usize, detail: String },
    #[error("no concept is assigned to attribute {0}")]
    EmptyVocabulary(String),
    #[error("unknown shortcut head {0}")]
    UnknownHead(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<ConceptError> for ExecError {
    fn from(e: ConceptError) -> Self {
        match e {
            ConceptError::Tensor(t) => ExecError::Tensor(t),
            other => ExecError::State(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgmentParams {
    /// Similarity shift.
    pub gamma: f64,
    /// Similarity temperature.
    pub tau: f64,
    /// Distance decay toward quasi-centers.
    pub alpha: f64,
    /// Cache entries needed before a concept's center is used.
    pub cache_min: u64,
    /// Debiasing strength.
    pub lambda: f64,
}

impl Default for JudgmentParams {
    fn default() -> Self {
        Self { gamma: 0.85, tau: 0.25, alpha: 0.01, cache_min: 50, lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasSpace {
    Probability,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub subspace_dim: usize,
    pub embed_std: f64,
    pub judgment: JudgmentParams,
    /// Ordered (source, target) attribute pairs that get a shortcut head.
    pub heads: Vec<(String, String)>,
    pub debias_space: DebiasSpace,
    /// Top-two prior probability gap below which an assignment is ambiguous.
    pub freeze_margin: f64,
    /// Freezing aborts when more than this fraction is ambiguous.
    pub max_ambiguous_fraction: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            subspace_dim: 64,
            embed_std: 0.02,
            judgment: JudgmentParams::default(),
            heads: all_pairs(&AttributeSchema::clevr()),
            debias_space: DebiasSpace::Probability,
            freeze_margin: 0.05,
            max_ambiguous_fraction: 0.25,
        }
    }
}

/// Every ordered pair of distinct attributes.
pub fn all_pairs(schema: &AttributeSchema) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for x in schema.attributes() {
        for y in schema.attributes() {
            if x != y {
                out.push((schema.attr_name(x).to_string(), schema.attr_name(y).to_string()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub src: AttrId,
    pub dst: AttrId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Mapping {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpace {
    schema: AttributeSchema,
    config: LearnerConfig,
    feature_dim: usize,
    store: ParamStore,
    prior: ParamId,
    maps: Vec<Mapping>,
    embeddings: Vec<ParamId>,
    heads: Vec<HeadParams>,
    assignment: Option<Vec<AttrId>>,
    pub cache: QuasiCenterCache,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: AttributeSchema,
    config: LearnerConfig,
    feature_dim: usize,
    params: BTreeMap<String, StoredTensor>,
    assignment: Option<Vec<usize>>,
    cache: QuasiCenterCache,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl ConceptSpace {
    pub fn new(schema: AttributeSchema, config: LearnerConfig, feature_dim: usize, seed: u64) -> Result<Self, ConceptError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.subspace_dim;
        let k = schema.n_attributes();
        let c = schema.n_concepts();
        let mut store = ParamStore::new();
        let prior = store.register("prior", Tensor::zeros(&[c, k]))?;
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut maps = Vec::with_capacity(k);
        for a in schema.attributes() {
            let name = schema.attr_name(a);
            let weight =
                store.register(format!("map.{name}.weight"), Tensor::matrix(d, feature_dim, uniform(&mut rng, d * feature_dim, bound))?)?;
            let bias = store.register(format!("map.{name}.bias"), Tensor::vector(uniform(&mut rng, d, bound)))?;
            maps.push(Mapping { weight, bias });
        }
        let normal = Normal::new(0.0, config.embed_std).map_err(|e| ConceptError::Checkpoint(e.to_string()))?;
        let mut embeddings = Vec::with_capacity(k);
        for a in schema.attributes() {
            let data: Vec<f64> = (0..c * d).map(|_| normal.sample(&mut rng)).collect();
            embeddings.push(store.register(format!("embed.{}", schema.attr_name(a)), Tensor::matrix(c, d, data)?)?);
        }
        let mut heads = Vec::with_capacity(config.heads.len());
        let hb = 1.0 / (d as f64).sqrt();
        for (x, y) in &config.heads {
            let lookup = |n: &str| schema.lookup_attr(n).map_err(|_| ConceptError::UnknownHead(format!("{x}:{y}")));
            let (src, dst) = (lookup(x)?, lookup(y)?);
            if src == dst {
                return Err(ConceptError::UnknownHead(format!("{x}:{y}")));
            }
            let p = format!("head.{x}->{y}");
            let w1 = store.register(format!("{p}.w1"), Tensor::matrix(d, d, uniform(&mut rng, d * d, hb))?)?;
            let b1 = store.register(format!("{p}.b1"), Tensor::vector(uniform(&mut rng, d, hb)))?;
            // zero output layer: the untrained head carries no information
            let w2 = store.register(format!("{p}.w2"), Tensor::zeros(&[d, d]))?;
            let b2 = store.register(format!("{p}.b2"), Tensor::zeros(&[d]))?;
            heads.push(HeadParams { src, dst, w1, b1, w2, b2 });
        }
        let cache = QuasiCenterCache::new(c, d);
        Ok(Self { schema, config, feature_dim, store, prior, maps, embeddings, heads, assignment: None, cache })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn judgment(&self) -> &JudgmentParams {
        &self.config.judgment
    }

    pub fn set_judgment(&mut self, params: JudgmentParams) {
        self.config.judgment = params;
    }

    pub fn set_debias_space(&mut self, space: DebiasSpace) {
        self.config.debias_space = space;
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn subspace_dim(&self) -> usize {
        self.config.subspace_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn prior_id(&self) -> ParamId {
        self.prior
    }

    pub fn mapping_ids(&self, k: AttrId) -> (ParamId, ParamId) {
        (self.maps[k.0].weight, self.maps[k.0].bias)
    }

    pub fn embedding_id(&self, k: AttrId) -> ParamId {
        self.embeddings[k.0]
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn head_index(&self, src: AttrId, dst: AttrId) -> Option<usize> {
        self.heads.iter().position(|h| h.src == src && h.dst == dst)
    }

    pub fn head_name(&self, h: usize) -> String {
        let hp = &self.heads[h];
        format!("{}->{}", self.schema.attr_name(hp.src), self.schema.attr_name(hp.dst))
    }

    /// Mapping and embedding parameters (the lesson-two set).
    pub fn map_embed_ids(&self) -> Vec<ParamId> {
        self.maps.iter().flat_map(|m| [m.weight, m.bias]).chain(self.embeddings.iter().copied()).collect()
    }

    /// Every non-head parameter.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.prior).chain(self.map_embed_ids()).collect()
    }

    pub fn phi_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| [h.w1, h.b1, h.w2, h.b2]).collect()
    }

    pub fn theta_hash(&self) -> String {
        self.store.hash_of(self.theta_ids())
    }

    pub fn phi_hash(&self) -> String {
        self.store.hash_of(self.phi_ids())
    }

    /// Softmax of the prior logits, one row per concept.
    pub fn prior_probs(&self) -> Vec<Vec<f64>> {
        let t = self.store.get(self.prior);
        (0..t.rows())
            .map(|i| {
                let row = t.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }

    /// Current argmax subspace of a concept and whether the argmax is tied.
    pub fn hierarchy(&self, c: ConceptId) -> (AttrId, bool) {
        if let Some(a) = &self.assignment {
            return (a[c.0], false);
        }
        let p = &self.prior_probs()[c.0];
        let mut best = 0;
        for (k, &x) in p.iter().enumerate() {
            if x > p[best] {
                best = k;
            }
        }
        let tied = p.iter().enumerate().any(|(k, &x)| k != best && x == p[best]);
        (AttrId(best), tied)
    }

    pub fn is_frozen(&self) -> bool {
        self.assignment.is_some()
    }

    pub fn assignment(&self) -> Option<&[AttrId]> {
        self.assignment.as_deref()
    }

    /// Fixes each concept to its argmax subspace (ties to the lowest index)
    /// and zeroes the embeddings of every other subspace.
    pub fn freeze_hierarchy(&mut self) -> Result<Vec<AttrId>, ConceptError> {
        if self.is_frozen() {
            return Err(ConceptError::AlreadyFrozen);
        }
        let probs = self.prior_probs();
        let mut assignment = Vec::with_capacity(probs.len());
        let mut ambiguous = Vec::new();
        for (ci, p) in probs.iter().enumerate() {
            let c = ConceptId(ci);
            let (a, tied) = self.hierarchy(c);
            let mut sorted = p.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            let margin = sorted[0] - sorted.get(1).copied().unwrap_or(0.0);
            if tied {
                warn!("concept {} has tied subspace priors; assigning to {}", self.schema.concept_name(c), self.schema.attr_name(a));
            }
            if tied || margin < self.config.freeze_margin {
                ambiguous.push(self.schema.concept_name(c).to_string());
            }
            assignment.push(a);
        }
        let total = probs.len();
        if ambiguous.len() as f64 > self.config.max_ambiguous_fraction * total as f64 {
            return Err(ConceptError::FreezeAborted { ambiguous: ambiguous.len(), total, detail: ambiguous.join(", ") });
        }
        for (k, &eid) in self.embeddings.iter().enumerate() {
            let e = self.store.get_mut(eid);
            for (ci, a) in assignment.iter().enumerate() {
                if a.0 != k {
                    e.row_mut(ci).iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        self.assignment = Some(assignment.clone());
        Ok(assignment)
    }

    /// Concepts assigned to subspace `a`, in id order.
    pub fn vocab_of(&self, a: AttrId) -> Result<Vec<ConceptId>, ConceptError> {
        let assignment = self.assignment.as_ref().ok_or(ConceptError::NotFrozen)?;
        let v: Vec<ConceptId> = (0..assignment.len()).filter(|&c| assignment[c] == a).map(ConceptId).collect();
        if v.is_empty() {
            return Err(ConceptError::EmptyVocabulary(self.schema.attr_name(a).to_string()));
        }
        Ok(v)
    }

    /// `f_k(v)` without a tape.
    pub fn map_feature(&self, feature: &[f64], k: AttrId) -> Vec<f64> {
        let w = self.store.get(self.maps[k.0].weight);
        let b = self.store.get(self.maps[k.0].bias);
        (0..w.rows()).map(|r| crate::tensor::dot_slices(w.row(r), feature) + b.data()[r]).collect()
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            schema: self.schema.clone(),
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            params: self.store.to_stored(),
            assignment: self.assignment.as_ref().map(|a| a.iter().map(|x| x.0).collect()),
            cache: self.cache.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConceptError> {
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| ConceptError::Checkpoint(e.to_string()))?;
        ck.schema.fix_after_deserialize();
        let mut space = Self::new(ck.schema, ck.config, ck.feature_dim, 0)?;
        space.store.load_stored(&ck.params)?;
        if let Some(a) = ck.assignment {
            if a.len() != space.schema.n_concepts() || a.iter().any(|&k| k >= space.schema.n_attributes()) {
                return Err(ConceptError::Checkpoint("assignment does not match schema".into()));
            }
            space.assignment = Some(a.into_iter().map(AttrId).collect());
        }
        if ck.cache.counts().len() != space.schema.n_concepts() || ck.cache.dim() != space.config.subspace_dim {
            return Err(ConceptError::Checkpoint("cache does not match schema".into()));
        }
        space.cache = ck.cache;
        Ok(space)
    }

    /// Hash over every parameter plus the assignment and cache.
    pub fn full_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.store.hash_of(self.store.ids()).as_bytes());
        if let Some(a) = &self.assignment {
            for x in a {
                h.update((x.0 as u64).to_le_bytes());
            }
        }
        for c in self.cache.counts() {
            h.update(c.to_le_bytes());
        }
        for ci in 0..self.schema.n_concepts() {
            for v in self.cache.center(ConceptId(ci)) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
