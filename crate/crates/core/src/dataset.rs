//! Dataset assembly and JSON Lines storage.
//!
//! A dataset directory holds `universe.json`, `scenes.jsonl` and `qa.jsonl`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{generate_question, parse_sample, sample_to_json, Constraints, ProgramError, QASample, QTypeMix};
use crate::scene::{perturb_scene, sample_scene, scene_rng, AttrId, BiasCondition, Perturbation, Scene, SceneError, SceneObject, Universe};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("question references unknown scene {0}")]
    MissingScene(u64),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
}

/// Salt separating question streams from scene streams.
const QUESTION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub condition: BiasCondition,
    pub scenes: usize,
    pub questions_per_scene: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub constraints: Constraints,
    pub mix: QTypeMix,
    pub perturb: Vec<Perturbation>,
    pub seed: u64,
    /// Added to scene indices so that several datasets never share ids.
    pub id_offset: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            condition: BiasCondition::Uniform,
            scenes: 100,
            questions_per_scene: 10,
            min_objects: 3,
            max_objects: 10,
            constraints: Constraints::default(),
            mix: QTypeMix::default(),
            perturb: vec![],
            seed: 0,
            id_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub samples: Vec<QASample>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(scenes: Vec<Scene>, samples: Vec<QASample>) -> Result<Self, DatasetError> {
        let index: HashMap<u64, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id, i)).collect();
        if index.len() != scenes.len() {
            return Err(DatasetError::Spec("duplicate scene ids".into()));
        }
        if let Some(s) = samples.iter().find(|s| !index.contains_key(&s.scene_id)) {
            return Err(DatasetError::MissingScene(s.scene_id));
        }
        Ok(Self { scenes, samples, index })
    }

    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.index.get(&id).map(|&i| &self.scenes[i])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Union with another dataset whose scene ids are disjoint.
    pub fn merged(&self, other: &Dataset) -> Result<Dataset, DatasetError> {
        let scenes = self.scenes.iter().chain(&other.scenes).cloned().collect();
        let samples = self.samples.iter().chain(&other.samples).cloned().collect();
        Dataset::new(scenes, samples)
    }

    /// Keeps samples satisfying `keep`, and the scenes they use.
    pub fn filtered(&self, keep: impl Fn(&QASample) -> bool) -> Dataset {
        let samples: Vec<QASample> = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        let used: std::collections::HashSet<u64> = samples.iter().map(|s| s.scene_id).collect();
        let scenes = self.scenes.iter().filter(|s| used.contains(&s.scene_id)).cloned().collect();
        Dataset::new(scenes, samples).expect("subset of a valid dataset")
    }

    /// Same questions on scenes perturbed along `attr` by `rho`.
    pub fn perturbed(&self, universe: &Universe, attr: AttrId, rho: f64) -> Result<Dataset, DatasetError> {
        let scenes = self.scenes.iter().map(|s| perturb_scene(universe, s, attr, rho)).collect::<Result<Vec<_>, _>>()?;
        Dataset::new(scenes, self.samples.clone())
    }
}

/// Samples scenes and questions. Scene `i` and its questions depend only
/// on `(seed, i)`.
pub fn build_dataset(universe: &Universe, spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    if spec.min_objects > spec.max_objects {
        return Err(DatasetError::Spec(format!("objects range {}..={} is empty", spec.min_objects, spec.max_objects)));
    }
    if spec.mix.0.is_empty() {
        return Err(DatasetError::Spec("question mix is empty".into()));
    }
    let mut scenes = Vec::with_capacity(spec.scenes);
    let mut samples = Vec::with_capacity(spec.scenes * spec.questions_per_scene);
    for i in 0..spec.scenes as u64 {
        let mut rng = scene_rng(spec.seed, i);
        let n = rand::Rng::random_range(&mut rng, spec.min_objects..=spec.max_objects);
        let mut scene = sample_scene(universe, spec.condition, n, spec.id_offset + i, &mut rng)?;
        for p in &spec.perturb {
            scene = perturb_scene(universe, &scene, p.attr, p.rho)?;
        }
        let mut qrng = scene_rng(spec.seed ^ QUESTION_SALT, i);
        for _ in 0..spec.questions_per_scene {
            for _ in 0..5 {
                let q = spec.mix.sample(&mut qrng);
                if let Ok(s) = generate_question(&scene, &universe.schema, q, &spec.constraints, &mut qrng) {
                    samples.push(s);
                    break;
                }
            }
        }
        scenes.push(scene);
    }
    Dataset::new(scenes, samples)
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    attributes: Vec<String>,
    position: [f64; 2],
    feature: Vec<f64>,
    noise_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct PerturbRecord {
    attr: String,
    rho: f64,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    condition: BiasCondition,
    #[serde(default)]
    perturbations: Vec<PerturbRecord>,
    objects: Vec<ObjectRecord>,
}

pub fn scene_to_json(scene: &Scene, universe: &Universe) -> String {
    let schema = &universe.schema;
    let rec = SceneRecord {
        scene_id: scene.scene_id,
        condition: scene.condition,
        perturbations: scene
            .perturbations
            .iter()
            .map(|p| PerturbRecord { attr: schema.attr_name(p.attr).to_string(), rho: p.rho })
            .collect(),
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectRecord {
                attributes: o.attributes.iter().map(|&c| schema.concept_name(c).to_string()).collect(),
                position: o.position,
                feature: o.feature.clone(),
                noise_seed: o.noise_seed,
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("scene serializes")
}

pub fn parse_scene(line: &str, universe: &Universe) -> Result<Scene, String> {
    let schema = &universe.schema;
    let rec: SceneRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let perturbations = rec
        .perturbations
        .iter()
        .map(|p| Ok(Perturbation { attr: schema.lookup_attr(&p.attr).map_err(|e| e.to_string())?, rho: p.rho }))
        .collect::<Result<Vec<_>, String>>()?;
    let mut objects = Vec::with_capacity(rec.objects.len());
    for o in rec.objects {
        if o.attributes.len() != schema.n_attributes() {
            return Err(format!("object has {} attributes, expected {}", o.attributes.len(), schema.n_attributes()));
        }
        let mut attributes = Vec::with_capacity(o.attributes.len());
        for (a, name) in schema.attributes().zip(&o.attributes) {
            let c = schema.lookup_concept(name).map_err(|e| e.to_string())?;
            if schema.attr_of(c) != a {
                return Err(format!("concept {name:?} is not a value of {}", schema.attr_name(a)));
            }
            attributes.push(c);
        }
        if o.feature.len() != universe.feature_dim() {
            return Err(format!("feature length {} but universe has {}", o.feature.len(), universe.feature_dim()));
        }
        objects.push(SceneObject { attributes, position: o.position, feature: o.feature, noise_seed: o.noise_seed });
    }
    Ok(Scene { scene_id: rec.scene_id, condition: rec.condition, perturbations, objects })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

pub fn save_dataset(dir: &Path, universe: &Universe, data: &Dataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("universe.json");
    fs::write(&p, universe.to_json()).map_err(io_err(&p))?;
    let mut scenes = String::new();
    for s in &data.scenes {
        scenes.push_str(&scene_to_json(s, universe));
        scenes.push('\n');
    }
    let p = dir.join("scenes.jsonl");
    fs::write(&p, scenes).map_err(io_err(&p))?;
    let mut qa = String::new();
    for s in &data.samples {
        qa.push_str(&sample_to_json(s, &universe.schema));
        qa.push('\n');
    }
    let p = dir.join("qa.jsonl");
    fs::write(&p, qa).map_err(io_err(&p))?;
    Ok(())
}

/// Loads a dataset directory and re-checks every stored answer.
pub fn load_dataset(dir: &Path) -> Result<(Universe, Dataset), DatasetError> {
    let p = dir.join("universe.json");
    let universe = Universe::from_json(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
    let p = dir.join("scenes.jsonl");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        scenes.push(parse_scene(line, &universe).map_err(|detail| DatasetError::Parse {
            path: p.display().to_string(),
            line: i + 1,
            detail,
        })?);
    }
    let p = dir.join("qa.jsonl");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let s = parse_sample(line, &universe.schema).map_err(|e| DatasetError::Parse {
            path: p.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        samples.push(s);
    }
    let data = Dataset::new(scenes, samples)?;
    for s in &data.samples {
        s.verify(data.scene(s.scene_id).expect("checked in new"), &universe.schema)?;
    }
    Ok((universe, data))
}
