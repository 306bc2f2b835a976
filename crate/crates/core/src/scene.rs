//! Synthetic CLEVR-style scenes.
//!
//! An object's feature is a fixed random linear mix of per-value latent
//! vectors (one per attribute) plus gaussian noise. The mix is full column
//! rank, so attributes stay linearly decodable but are not axis-aligned.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("generation error: {0}")]
    Generation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
}

/// Global concept index across all attributes, in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptId(pub usize);

/// Attribute (superordinate) index in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttrId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

pub const COLOR: AttrId = AttrId(0);
pub const SHAPE: AttrId = AttrId(1);
pub const SIZE: AttrId = AttrId(2);
pub const MATERIAL: AttrId = AttrId(3);

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self, SceneError> {
        let mut seen = std::collections::HashSet::new();
        for a in &attributes {
            if a.concepts.len() < 2 {
                return Err(SceneError::Config(format!("attribute {} needs at least two concepts", a.name)));
            }
            for c in &a.concepts {
                if !seen.insert(c.clone()) {
                    return Err(SceneError::Config(format!("concept {c} appears twice")));
                }
            }
        }
        let mut s = Self { attributes, offsets: vec![] };
        s.rebuild_offsets();
        Ok(s)
    }

    fn rebuild_offsets(&mut self) {
        let mut acc = 0;
        self.offsets = self
            .attributes
            .iter()
            .map(|a| {
                let o = acc;
                acc += a.concepts.len();
                o
            })
            .collect();
    }

    /// color, shape, size, material with the CLEVR vocabularies.
    pub fn clevr() -> Self {
        let attr = |name: &str, cs: &[&str]| Attribute { name: name.to_string(), concepts: cs.iter().map(|s| s.to_string()).collect() };
        Self::new(vec![
            attr("color", &["gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"]),
            attr("shape", &["cube", "sphere", "cylinder"]),
            attr("size", &["small", "large"]),
            attr("material", &["rubber", "metal"]),
        ])
        .expect("default schema is valid")
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.attributes.iter().map(|a| a.concepts.len()).sum()
    }

    pub fn attributes(&self) -> impl Iterator<Item = AttrId> {
        (0..self.attributes.len()).map(AttrId)
    }

    pub fn concepts(&self) -> impl Iterator<Item = ConceptId> {
        (0..self.n_concepts()).map(ConceptId)
    }

    pub fn attr_name(&self, a: AttrId) -> &str {
        &self.attributes[a.0].name
    }

    pub fn vocab_size(&self, a: AttrId) -> usize {
        self.attributes[a.0].concepts.len()
    }

    /// Concepts of attribute `a`, in vocabulary order.
    pub fn vocab(&self, a: AttrId) -> Vec<ConceptId> {
        let o = self.offsets[a.0];
        (o..o + self.vocab_size(a)).map(ConceptId).collect()
    }

    pub fn concept(&self, a: AttrId, local: usize) -> ConceptId {
        ConceptId(self.offsets[a.0] + local)
    }

    /// Ground-truth attribute of a concept.
    pub fn attr_of(&self, c: ConceptId) -> AttrId {
        let idx = self.offsets.iter().rposition(|&o| o <= c.0).expect("concept in range");
        AttrId(idx)
    }

    /// Position of `c` inside its attribute's vocabulary.
    pub fn local_index(&self, c: ConceptId) -> usize {
        c.0 - self.offsets[self.attr_of(c).0]
    }

    pub fn concept_name(&self, c: ConceptId) -> &str {
        let a = self.attr_of(c);
        &self.attributes[a.0].concepts[self.local_index(c)]
    }

    pub fn lookup_concept(&self, name: &str) -> Result<ConceptId, SceneError> {
        self.concepts().find(|&c| self.concept_name(c) == name).ok_or_else(|| SceneError::UnknownConcept(name.to_string()))
    }

    pub fn lookup_attr(&self, name: &str) -> Result<AttrId, SceneError> {
        self.attributes().find(|&a| self.attr_name(a) == name).ok_or_else(|| SceneError::UnknownAttribute(name.to_string()))
    }

    pub(crate) fn fix_after_deserialize(&mut self) {
        self.rebuild_offsets();
    }
}

/// Which shape/color compositions the sampler may produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BiasCondition {
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "cogent_A")]
    CogentA,
    #[serde(rename = "cogent_B")]
    CogentB,
}

impl fmt::Display for BiasCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasCondition::Uniform => "uniform",
            BiasCondition::CogentA => "cogent_A",
            BiasCondition::CogentB => "cogent_B",
        })
    }
}

impl FromStr for BiasCondition {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, SceneError> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "cogent_A" | "cogent_a" | "A" => Ok(Self::CogentA),
            "cogent_B" | "cogent_b" | "B" => Ok(Self::CogentB),
            other => Err(SceneError::Config(format!("unknown condition {other}"))),
        }
    }
}

/// Condition-A cube palette; cylinders get the complement.
pub const PALETTE_A: [&str; 4] = ["gray", "blue", "brown", "yellow"];
pub const PALETTE_B: [&str; 4] = ["red", "green", "purple", "cyan"];

impl BiasCondition {
    /// Colors allowed for a shape under this condition.
    pub fn allowed_colors(&self, schema: &AttributeSchema, shape: &str) -> Vec<ConceptId> {
        let all = schema.vocab(COLOR);
        let pick =
            |names: &[&str]| -> Vec<ConceptId> { all.iter().copied().filter(|&c| names.contains(&schema.concept_name(c))).collect() };
        match (self, shape) {
            (BiasCondition::CogentA, "cube") | (BiasCondition::CogentB, "cylinder") => pick(&PALETTE_A),
            (BiasCondition::CogentA, "cylinder") | (BiasCondition::CogentB, "cube") => pick(&PALETTE_B),
            _ => all,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniverseConfig {
    /// Latent dimension per attribute, in schema order.
    pub latent_dims: Vec<usize>,
    /// Multiplier applied to each attribute's latents.
    pub latent_scales: Vec<f64>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub min_sep: f64,
    pub position_retries: usize,
    pub rank_retries: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            latent_dims: vec![8, 4, 2, 2],
            latent_scales: vec![1.0, 1.0, 1.0, 1.0],
            feature_dim: 256,
            noise_sigma: 1.0,
            min_sep: 0.1,
            position_retries: 20,
            rank_retries: 10,
        }
    }
}

/// The fixed generative model shared by every scene of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub seed: u64,
    pub config: UniverseConfig,
    pub schema: AttributeSchema,
    /// One latent per concept, in concept order.
    pub latents: Vec<Vec<f64>>,
    /// `feature_dim x sum(latent_dims)`, row-major.
    pub mixer: Vec<f64>,
}

impl Universe {
    pub fn latent_total(&self) -> usize {
        self.config.latent_dims.iter().sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("universe serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let mut u: Universe = serde_json::from_str(text).map_err(|e| SceneError::Config(format!("bad universe file: {e}")))?;
        u.schema.fix_after_deserialize();
        Ok(u)
    }

    /// Nearest other latent of the same attribute, by Euclidean distance.
    pub fn nearest_other(&self, c: ConceptId) -> ConceptId {
        let a = self.schema.attr_of(c);
        let own = &self.latents[c.0];
        self.schema
            .vocab(a)
            .into_iter()
            .filter(|&o| o != c)
            .min_by(|&x, &y| {
                let dx = sq_dist(own, &self.latents[x.0]);
                let dy = sq_dist(own, &self.latents[y.0]);
                dx.partial_cmp(&dy).expect("finite distances")
            })
            .expect("at least two concepts per attribute")
    }

    /// Latent of `c`, shifted a fraction `rho` toward its nearest neighbour.
    pub fn perturbed_latent(&self, c: ConceptId, rho: f64) -> Vec<f64> {
        let own = &self.latents[c.0];
        if rho == 0.0 {
            return own.clone();
        }
        let other = &self.latents[self.nearest_other(c).0];
        own.iter().zip(other).map(|(a, b)| (1.0 - rho) * a + rho * b).collect()
    }

    /// Feature for an object. `perturbations` lists `(attribute, rho)`.
    pub fn synthesize(&self, attributes: &[ConceptId], perturbations: &[Perturbation], noise_seed: u64) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.latent_total());
        for (a, &c) in attributes.iter().enumerate() {
            let rho = perturbations.iter().rev().find(|p| p.attr == AttrId(a)).map_or(0.0, |p| p.rho);
            let scale = self.config.latent_scales.get(a).copied().unwrap_or(1.0);
            z.extend(self.perturbed_latent(c, rho).into_iter().map(|x| x * scale));
        }
        let cols = z.len();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        (0..self.config.feature_dim)
            .map(|r| {
                let mix: f64 = self.mixer[r * cols..(r + 1) * cols].iter().zip(&z).map(|(m, x)| m * x).sum();
                let eps: f64 = StandardNormal.sample(&mut rng);
                mix + self.config.noise_sigma * eps
            })
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Builds the fixed latents and mixing matrix for `seed`.
pub fn make_universe(seed: u64, config: UniverseConfig) -> Result<Universe, SceneError> {
    make_universe_with_schema(seed, config, AttributeSchema::clevr())
}

pub fn make_universe_with_schema(seed: u64, config: UniverseConfig, schema: AttributeSchema) -> Result<Universe, SceneError> {
    if config.latent_dims.len() != schema.n_attributes() {
        return Err(SceneError::Config(format!("{} latent dims for {} attributes", config.latent_dims.len(), schema.n_attributes())));
    }
    if config.latent_dims.iter().any(|&d| d < 2) {
        return Err(SceneError::Config("latent dims must be at least 2".into()));
    }
    if config.noise_sigma.is_nan() || config.noise_sigma < 0.0 {
        return Err(SceneError::Config("noise_sigma must be non-negative".into()));
    }
    let total: usize = config.latent_dims.iter().sum();
    if config.feature_dim < total {
        return Err(SceneError::Config("feature_dim smaller than total latent dim".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = vec![Vec::new(); schema.n_concepts()];
    for a in schema.attributes() {
        let d = config.latent_dims[a.0];
        loop {
            for c in schema.vocab(a) {
                latents[c.0] = (0..d).map(|_| gaussian(&mut rng)).collect();
            }
            let vocab = schema.vocab(a);
            let distinct =
                vocab.iter().enumerate().all(|(i, &x)| vocab[i + 1..].iter().all(|&y| sq_dist(&latents[x.0], &latents[y.0]) > 1e-12));
            if distinct {
                break;
            }
        }
    }
    let std = 1.0 / (total as f64).sqrt();
    for _ in 0..config.rank_retries.max(1) {
        let mixer: Vec<f64> = (0..config.feature_dim * total).map(|_| std * gaussian(&mut rng)).collect();
        if full_column_rank(&mixer, config.feature_dim, total) {
            return Ok(Universe { seed, config, schema, latents, mixer });
        }
    }
    Err(SceneError::Generation("mixer stayed rank deficient".into()))
}

fn full_column_rank(data: &[f64], rows: usize, cols: usize) -> bool {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let sv = m.singular_values();
    let max = sv.max();
    max > 0.0 && sv.iter().all(|&s| s > 1e-8 * max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub attr: AttrId,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    /// One concept per attribute, in schema order.
    pub attributes: Vec<ConceptId>,
    pub position: [f64; 2],
    pub feature: Vec<f64>,
    pub noise_seed: u64,
}

impl SceneObject {
    pub fn has(&self, c: ConceptId, schema: &AttributeSchema) -> bool {
        self.attributes[schema.attr_of(c).0] == c
    }

    pub fn value(&self, a: AttrId) -> ConceptId {
        self.attributes[a.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub condition: BiasCondition,
    pub perturbations: Vec<Perturbation>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// RNG stream for scene `index` of a dataset seeded with `master_seed`.
pub fn scene_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

pub const MIN_OBJECTS: usize = 3;
pub const MAX_OBJECTS: usize = 10;

/// Samples attributes (shape first, then a color allowed for that shape),
/// rejection-sampled positions, and synthesized features.
pub fn sample_scene(
    universe: &Universe,
    condition: BiasCondition,
    n_objects: usize,
    scene_id: u64,
    rng: &mut impl Rng,
) -> Result<Scene, SceneError> {
    if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&n_objects) {
        return Err(SceneError::Config(format!("n_objects must be in 3..=10, got {n_objects}")));
    }
    let schema = &universe.schema;
    let cfg = &universe.config;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut attributes = vec![ConceptId(0); schema.n_attributes()];
        let shape_vocab = schema.vocab(SHAPE);
        let shape = shape_vocab[rng.random_range(0..shape_vocab.len())];
        attributes[SHAPE.0] = shape;
        let colors = condition.allowed_colors(schema, schema.concept_name(shape));
        attributes[COLOR.0] = colors[rng.random_range(0..colors.len())];
        for a in schema.attributes().filter(|&a| a != SHAPE && a != COLOR) {
            let v = schema.vocab(a);
            attributes[a.0] = v[rng.random_range(0..v.len())];
        }
        let mut placed = None;
        for _ in 0..cfg.position_retries {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            let clear = objects.iter().all(|o| {
                let dx = o.position[0] - p[0];
                let dy = o.position[1] - p[1];
                (dx * dx + dy * dy).sqrt() >= cfg.min_sep
            });
            if clear {
                placed = Some(p);
                break;
            }
        }
        let position = placed.ok_or_else(|| SceneError::Generation(format!("could not place object in scene {scene_id}")))?;
        let noise_seed = rng.next_u64();
        let feature = universe.synthesize(&attributes, &[], noise_seed);
        objects.push(SceneObject { attributes, position, feature, noise_seed });
    }
    Ok(Scene { scene_id, condition, perturbations: vec![], objects })
}

/// Shifts every object's latent for `attr` toward the nearest other value
/// and re-synthesizes features with the same noise. Labels are unchanged.
pub fn perturb_scene(universe: &Universe, scene: &Scene, attr: AttrId, rho: f64) -> Result<Scene, SceneError> {
    if attr.0 >= universe.schema.n_attributes() {
        return Err(SceneError::UnknownAttribute(format!("#{}", attr.0)));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(SceneError::Config(format!("rho must be in [0,1], got {rho}")));
    }
    let mut out = scene.clone();
    out.perturbations.retain(|p| p.attr != attr);
    out.perturbations.push(Perturbation { attr, rho });
    for o in &mut out.objects {
        o.feature = universe.synthesize(&o.attributes, &out.perturbations, o.noise_seed);
    }
    Ok(out)
}

/// Objects whose shape/color pair the condition forbids.
pub fn palette_violations(universe: &Universe, scene: &Scene, condition: BiasCondition) -> usize {
    let schema = &universe.schema;
    scene
        .objects
        .iter()
        .filter(|o| {
            let shape = schema.concept_name(o.value(SHAPE));
            !condition.allowed_colors(schema, shape).contains(&o.value(COLOR))
        })
        .count()
}

/// Scenes `0..n` of a dataset, each from its own RNG stream.
pub fn generate_scenes(
    universe: &Universe,
    condition: BiasCondition,
    master_seed: u64,
    n: usize,
    objects: std::ops::RangeInclusive<usize>,
) -> Result<Vec<Scene>, SceneError> {
    (0..n as u64)
        .map(|i| {
            let mut rng = scene_rng(master_seed, i);
            let k = rng.random_range(objects.clone());
            sample_scene(universe, condition, k, i, &mut rng)
        })
        .collect()
}
