use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{brute_force_answer, Answer, Cmp, Program, ProgramError, ProgramStep, QASample, QType, Relation, StepKind};
use crate::scene::{AttrId, AttributeSchema, ConceptId, Scene};

const MAX_TRIES: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constraints {
    /// Attributes whose concepts may not appear anywhere in the program.
    pub forbidden_attrs: Vec<AttrId>,
    /// Programs must have depth strictly below this.
    pub max_depth: Option<usize>,
    /// Probability of routing a referring expression through a relation.
    pub relation_prob: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Self { forbidden_attrs: vec![], max_depth: None, relation_prob: 0.3 }
    }
}

impl Constraints {
    fn allowed(&self, schema: &AttributeSchema) -> Vec<AttrId> {
        schema.attributes().filter(|a| !self.forbidden_attrs.contains(a)).collect()
    }
}

/// Relative weights of the question categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTypeMix(pub Vec<(QType, f64)>);

impl Default for QTypeMix {
    fn default() -> Self {
        Self(QType::ALL.iter().map(|&q| (q, 1.0)).collect())
    }
}

impl QTypeMix {
    pub fn only(q: QType) -> Self {
        Self(vec![(q, 1.0)])
    }

    pub fn sample(&self, rng: &mut impl Rng) -> QType {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut x = rng.random::<f64>() * total;
        for &(q, w) in &self.0 {
            if x < w {
                return q;
            }
            x -= w;
        }
        self.0.last().expect("non-empty mix").0
    }
}

struct Builder<'a> {
    scene: &'a Scene,
    schema: &'a AttributeSchema,
    allowed: Vec<AttrId>,
    relation_prob: f64,
    steps: Vec<ProgramStep>,
}

impl<'a> Builder<'a> {
    fn push(&mut self, kind: StepKind, inputs: Vec<usize>) -> usize {
        self.steps.push(ProgramStep::new(kind, inputs));
        self.steps.len() - 1
    }

    fn members(&self, set: &[bool]) -> Vec<usize> {
        set.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    /// Concepts of `target` that single it out within `pool`.
    fn unique_desc(&self, target: usize, pool: &[bool], attrs: &[AttrId], rng: &mut impl Rng) -> Option<Vec<ConceptId>> {
        let mut order = attrs.to_vec();
        order.shuffle(rng);
        let obj = &self.scene.objects[target];
        let mut current = pool.to_vec();
        let mut desc = Vec::new();
        for a in order {
            if !desc.is_empty() && self.members(&current) == [target] {
                break;
            }
            let c = obj.value(a);
            let next: Vec<bool> = current.iter().zip(&self.scene.objects).map(|(&m, o)| m && o.has(c, self.schema)).collect();
            if desc.is_empty() || next != current {
                desc.push(c);
                current = next;
            }
        }
        (self.members(&current) == [target] && !desc.is_empty()).then_some(desc)
    }

    /// Appends steps producing exactly `{target}` and returns the last index.
    fn refer(&mut self, target: usize, exclude: Option<AttrId>, allow_relation: bool, rng: &mut impl Rng) -> Option<usize> {
        let n = self.scene.objects.len();
        let attrs: Vec<AttrId> = self.allowed.iter().copied().filter(|&a| Some(a) != exclude).collect();
        if attrs.is_empty() {
            return None;
        }
        if allow_relation && rng.random::<f64>() < self.relation_prob {
            let mut refs: Vec<usize> = (0..n).filter(|&r| r != target).collect();
            refs.shuffle(rng);
            let mut rels = Relation::ALL.to_vec();
            rels.shuffle(rng);
            let anchor_target = self.scene.objects[target].position;
            'outer: for &r in refs.iter().take(3) {
                for &rel in &rels {
                    let anchor = self.scene.objects[r].position;
                    if !rel.holds(anchor_target, anchor) {
                        continue;
                    }
                    let related: Vec<bool> = (0..n).map(|j| j != r && rel.holds(self.scene.objects[j].position, anchor)).collect();
                    let Some(desc) = self.unique_desc(target, &related, &attrs, rng) else { continue };
                    let mark = self.steps.len();
                    let Some(ref_idx) = self.refer(r, None, false, rng) else {
                        self.steps.truncate(mark);
                        continue 'outer;
                    };
                    let rel_idx = self.push(StepKind::Relate(rel), vec![ref_idx]);
                    return Some(self.push(StepKind::Filter(desc), vec![rel_idx]));
                }
            }
        }
        let all = vec![true; n];
        let desc = self.unique_desc(target, &all, &attrs, rng)?;
        Some(self.push(StepKind::Filter(desc), vec![0]))
    }

    /// Appends a filtered object set (possibly empty).
    fn set_expr(&mut self, rng: &mut impl Rng) -> Option<usize> {
        let n = self.scene.objects.len();
        let mut attrs = self.allowed.clone();
        attrs.shuffle(rng);
        let k = if attrs.len() > 1 && rng.random::<f64>() < 0.4 { 2 } else { 1 };
        let source = rng.random_range(0..n);
        let from_object = rng.random::<f64>() < 0.6;
        let desc: Vec<ConceptId> = attrs[..k.min(attrs.len())]
            .iter()
            .map(|&a| {
                if from_object {
                    self.scene.objects[source].value(a)
                } else {
                    let v = self.schema.vocab(a);
                    v[rng.random_range(0..v.len())]
                }
            })
            .collect();
        if desc.is_empty() {
            return None;
        }
        let input = if rng.random::<f64>() < self.relation_prob {
            let r = rng.random_range(0..n);
            let rel = Relation::ALL[rng.random_range(0..4)];
            let ref_idx = self.refer(r, None, false, rng)?;
            self.push(StepKind::Relate(rel), vec![ref_idx])
        } else {
            0
        };
        Some(self.push(StepKind::Filter(desc), vec![input]))
    }
}

fn try_once(scene: &Scene, schema: &AttributeSchema, qtype: QType, constraints: &Constraints, rng: &mut impl Rng) -> Option<Program> {
    let n = scene.objects.len();
    let allowed = constraints.allowed(schema);
    if allowed.is_empty() || n == 0 {
        return None;
    }
    let mut b = Builder {
        scene,
        schema,
        allowed: allowed.clone(),
        relation_prob: constraints.relation_prob,
        steps: vec![ProgramStep::new(StepKind::Scene, vec![])],
    };
    match qtype {
        QType::Query => {
            let target = rng.random_range(0..n);
            let attr = allowed[rng.random_range(0..allowed.len())];
            let r = b.refer(target, Some(attr), true, rng)?;
            b.push(StepKind::Query(attr), vec![r]);
        }
        QType::Exist | QType::Count => {
            let s = b.set_expr(rng)?;
            b.push(if qtype == QType::Exist { StepKind::Exist } else { StepKind::Count }, vec![s]);
        }
        QType::CountEq | QType::CountGt | QType::CountLt => {
            let s1 = b.set_expr(rng)?;
            let c1 = b.push(StepKind::Count, vec![s1]);
            let s2 = b.set_expr(rng)?;
            let c2 = b.push(StepKind::Count, vec![s2]);
            b.push(StepKind::CompareCount(qtype.cmp().expect("count comparison")), vec![c1, c2]);
        }
        QType::CompareAttr => {
            if n < 2 {
                return None;
            }
            let attr = allowed[rng.random_range(0..allowed.len())];
            let t1 = rng.random_range(0..n);
            let same: Vec<usize> = (0..n).filter(|&j| j != t1 && scene.objects[j].value(attr) == scene.objects[t1].value(attr)).collect();
            let t2 = if !same.is_empty() && rng.random::<f64>() < 0.5 {
                same[rng.random_range(0..same.len())]
            } else {
                let others: Vec<usize> = (0..n).filter(|&j| j != t1).collect();
                others[rng.random_range(0..others.len())]
            };
            let r1 = b.refer(t1, Some(attr), true, rng)?;
            let r2 = b.refer(t2, Some(attr), true, rng)?;
            b.push(StepKind::CompareAttr(attr), vec![r1, r2]);
        }
    }
    let program = Program::new(b.steps).ok()?;
    if let Some(limit) = constraints.max_depth {
        if program.depth() >= limit {
            return None;
        }
    }
    Some(program)
}

/// Builds one question of type `qtype` about `scene`, retrying until the
/// program satisfies the constraints and has unique referents.
pub fn generate_question(
    scene: &Scene,
    schema: &AttributeSchema,
    qtype: QType,
    constraints: &Constraints,
    rng: &mut impl Rng,
) -> Result<QASample, ProgramError> {
    for _ in 0..MAX_TRIES {
        let Some(program) = try_once(scene, schema, qtype, constraints, rng) else { continue };
        let Ok(answer) = brute_force_answer(scene, &program, schema) else { continue };
        let question_text = render(&program, schema);
        let depth = program.depth();
        return Ok(QASample { scene_id: scene.scene_id, qtype, program, question_text, answer, depth });
    }
    Err(ProgramError::Generation { qtype, tries: MAX_TRIES })
}

fn noun_phrase(cs: &[ConceptId], schema: &AttributeSchema) -> String {
    // size color material shape, as in CLEVR templates
    let order = [2usize, 0, 3];
    let mut words: Vec<&str> = Vec::new();
    for a in order {
        if let Some(c) = cs.iter().find(|&&c| schema.attr_of(c).0 == a) {
            words.push(schema.concept_name(*c));
        }
    }
    let shape = cs.iter().find(|&&c| schema.attr_of(c).0 == 1).map(|&c| schema.concept_name(c)).unwrap_or("object");
    words.push(shape);
    words.join(" ")
}

fn describe(program: &Program, idx: usize, schema: &AttributeSchema) -> String {
    let step = &program.steps[idx];
    match &step.kind {
        StepKind::Scene => "object".into(),
        StepKind::Filter(cs) => {
            let base = noun_phrase(cs, schema);
            let input = step.inputs[0];
            match program.steps[input].kind {
                StepKind::Relate(rel) => {
                    let anchor = describe(program, program.steps[input].inputs[0], schema);
                    let phrase = match rel {
                        Relation::Left => "left of",
                        Relation::Right => "right of",
                        Relation::Front => "in front of",
                        Relation::Behind => "behind",
                    };
                    format!("{base} {phrase} the {anchor}")
                }
                _ => base,
            }
        }
        StepKind::Relate(rel) => format!("object {} the {}", rel.name(), describe(program, step.inputs[0], schema)),
        _ => String::new(),
    }
}

/// Human-readable question for logs; the engine never reads it.
pub(crate) fn render(program: &Program, schema: &AttributeSchema) -> String {
    let out = program.output();
    let d = |i: usize| describe(program, i, schema);
    match &out.kind {
        StepKind::Query(a) => format!("What is the {} of the {}?", schema.attr_name(*a), d(out.inputs[0])),
        StepKind::Exist => format!("Is there a {}?", d(out.inputs[0])),
        StepKind::Count => format!("How many {}s are there?", d(out.inputs[0])),
        StepKind::CompareAttr(a) => {
            format!("Does the {} have the same {} as the {}?", d(out.inputs[0]), schema.attr_name(*a), d(out.inputs[1]))
        }
        StepKind::CompareCount(cmp) => {
            let a = d(program.steps[out.inputs[0]].inputs[0]);
            let b = d(program.steps[out.inputs[1]].inputs[0]);
            match cmp {
                Cmp::Eq => format!("Are there the same number of {a}s and {b}s?"),
                Cmp::Gt => format!("Are there more {a}s than {b}s?"),
                Cmp::Lt => format!("Are there fewer {a}s than {b}s?"),
            }
        }
        _ => String::new(),
    }
}

impl QASample {
    /// Checks the stored answer against the symbolic oracle.
    pub fn verify(&self, scene: &Scene, schema: &AttributeSchema) -> Result<(), ProgramError> {
        let oracle = brute_force_answer(scene, &self.program, schema)?;
        if oracle != self.answer {
            return Err(ProgramError::AnswerMismatch { stored: self.answer.render(schema), oracle: oracle.render(schema) });
        }
        Ok(())
    }

    pub fn is_boolean(&self) -> bool {
        matches!(self.answer, Answer::Boolean(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::tests::{scene_with, worked_example};
    use crate::scene::{make_universe, sample_scene, scene_rng, BiasCondition, UniverseConfig, COLOR};

    #[test]
    fn worked_example_text() {
        let schema = AttributeSchema::clevr();
        let p = worked_example(&schema);
        assert_eq!(render(&p, &schema), "What is the size of the sphere left of the blue metal object?");
    }

    #[test]
    fn query_finds_unique_referent() {
        let (scene, schema) = scene_with(&[
            (&["blue", "metal", "cube", "large"], [0.8, 0.5]),
            (&["red", "rubber", "sphere", "small"], [0.2, 0.5]),
            (&["green", "rubber", "sphere", "large"], [0.9, 0.1]),
        ]);
        let mut rng = scene_rng(0, 0);
        for _ in 0..100 {
            let s = generate_question(&scene, &schema, QType::Query, &Constraints::default(), &mut rng).unwrap();
            assert!(matches!(s.answer, Answer::Concept(_)));
            s.verify(&scene, &schema).unwrap();
        }
    }

    #[test]
    fn color_exclusion_holds() {
        let u = make_universe(0, UniverseConfig::default()).unwrap();
        let constraints = Constraints { forbidden_attrs: vec![COLOR], ..Default::default() };
        let mix = QTypeMix::default();
        let mut rng = scene_rng(11, 0);
        let mut made = 0;
        let mut i = 0u64;
        while made < 10_000 {
            let s = sample_scene(&u, BiasCondition::Uniform, 3 + (i as usize % 8), i, &mut scene_rng(4, i)).unwrap();
            i += 1;
            let q = mix.sample(&mut rng);
            let Ok(sample) = generate_question(&s, &u.schema, q, &constraints, &mut rng) else { continue };
            made += 1;
            assert!(!sample.program.mentions_attr(COLOR, &u.schema), "{}", sample.question_text);
        }
    }

    #[test]
    fn lesson_one_constraints() {
        let u = make_universe(0, UniverseConfig::default()).unwrap();
        let constraints = Constraints { max_depth: Some(6), ..Default::default() };
        let mut rng = scene_rng(12, 0);
        for i in 0..2000u64 {
            let s = sample_scene(&u, BiasCondition::Uniform, 3 + (i as usize % 3), i, &mut scene_rng(5, i)).unwrap();
            if let Ok(sample) = generate_question(&s, &u.schema, QType::Query, &constraints, &mut rng) {
                assert!(sample.depth < 6);
            }
        }
    }

    #[test]
    fn mix_sampling_covers_all_types() {
        let mix = QTypeMix::default();
        let mut rng = scene_rng(0, 0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..500 {
            seen.insert(mix.sample(&mut rng));
        }
        assert_eq!(seen.len(), 7);
    }
}
