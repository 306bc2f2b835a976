//! Reasoning programs: typed steps, a symbolic ground-truth interpreter,
//! template-based generation, and JSON Lines encoding.

mod generate;
mod io;

pub use generate::{generate_question, Constraints, QTypeMix};
pub use io::{parse_sample, sample_to_json, QaRecord};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AttrId, AttributeSchema, ConceptId, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("step {step}: {detail}")]
    Malformed { step: usize, detail: String },
    #[error("step {step}: reference to slot {slot} is dangling")]
    DanglingReference { step: usize, slot: usize },
    #[error("step {step}: ambiguous referent ({found} objects)")]
    Ambiguous { step: usize, found: usize },
    #[error("unknown concept {token:?}{}", at_step(*.step))]
    UnknownConcept { token: String, step: Option<usize> },
    #[error("unknown attribute {token:?}{}", at_step(*.step))]
    UnknownAttribute { token: String, step: Option<usize> },
    #[error("step {step}: unknown step kind {token:?}")]
    UnknownKind { step: usize, token: String },
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("no valid {qtype} question after {tries} attempts")]
    Generation { qtype: QType, tries: usize },
    #[error("stored answer {stored} disagrees with oracle answer {oracle}")]
    AnswerMismatch { stored: String, oracle: String },
}

fn at_step(step: Option<usize>) -> String {
    step.map(|s| format!(" at step {s}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Left,
    Right,
    Front,
    Behind,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Front, Relation::Behind];

    /// Whether object at `a` stands in this relation to the reference at `b`.
    /// Front means larger y (closer to the camera).
    pub fn holds(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        match self {
            Relation::Left => a[0] < b[0],
            Relation::Right => a[0] > b[0],
            Relation::Front => a[1] > b[1],
            Relation::Behind => a[1] < b[1],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Behind => "behind",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
}

impl Cmp {
    pub fn apply(&self, a: usize, b: usize) -> bool {
        match self {
            Cmp::Eq => a == b,
            Cmp::Gt => a > b,
            Cmp::Lt => a < b,
        }
    }

    pub fn symbol(&self) -> &'static str {
        match self {
            Cmp::Eq => "=",
            Cmp::Gt => ">",
            Cmp::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StepKind {
    Scene,
    /// Keeps objects having every listed concept.
    Filter(Vec<ConceptId>),
    Relate(Relation),
    Query(AttrId),
    Exist,
    Count,
    CompareAttr(AttrId),
    CompareCount(Cmp),
}

impl StepKind {
    pub fn name(&self) -> &'static str {
        match self {
            StepKind::Scene => "scene",
            StepKind::Filter(_) => "filter",
            StepKind::Relate(_) => "relate",
            StepKind::Query(_) => "query",
            StepKind::Exist => "exist",
            StepKind::Count => "count",
            StepKind::CompareAttr(_) => "compare_attr",
            StepKind::CompareCount(_) => "compare_count",
        }
    }

    fn arity(&self) -> usize {
        match self {
            StepKind::Scene => 0,
            StepKind::CompareAttr(_) | StepKind::CompareCount(_) => 2,
            _ => 1,
        }
    }

    fn produces_set(&self) -> bool {
        matches!(self, StepKind::Scene | StepKind::Filter(_) | StepKind::Relate(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProgramStep {
    pub kind: StepKind,
    /// Indices of earlier steps consumed by this one.
    pub inputs: Vec<usize>,
}

impl ProgramStep {
    pub fn new(kind: StepKind, inputs: Vec<usize>) -> Self {
        Self { kind, inputs }
    }
}

/// A DAG of steps in topological order; the last step is the output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Program {
    pub steps: Vec<ProgramStep>,
}

impl Program {
    pub fn new(steps: Vec<ProgramStep>) -> Result<Self, ProgramError> {
        let p = Self { steps };
        p.validate()?;
        Ok(p)
    }

    pub fn output(&self) -> &ProgramStep {
        self.steps.last().expect("validated programs are non-empty")
    }

    /// Checks arity, slot references, input types and the single-output rule.
    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.steps.is_empty() {
            return Err(ProgramError::Malformed { step: 0, detail: "empty program".into() });
        }
        let last = self.steps.len() - 1;
        let mut consumed = vec![false; self.steps.len()];
        for (i, step) in self.steps.iter().enumerate() {
            if step.inputs.len() != step.kind.arity() {
                return Err(ProgramError::Malformed {
                    step: i,
                    detail: format!("expected {} inputs, got {}", step.kind.arity(), step.inputs.len()),
                });
            }
            if let StepKind::Filter(cs) = &step.kind {
                if cs.is_empty() {
                    return Err(ProgramError::Malformed { step: i, detail: "filter without concepts".into() });
                }
            }
            for &slot in &step.inputs {
                if slot >= i {
                    return Err(ProgramError::DanglingReference { step: i, slot });
                }
                consumed[slot] = true;
                let src = &self.steps[slot].kind;
                let ok = match step.kind {
                    StepKind::CompareCount(_) => matches!(src, StepKind::Count),
                    _ => src.produces_set(),
                };
                if !ok {
                    return Err(ProgramError::Malformed { step: i, detail: format!("input slot {slot} has the wrong type") });
                }
            }
        }
        for (i, step) in self.steps.iter().enumerate().take(last) {
            if !consumed[i] {
                return Err(ProgramError::Malformed { step: i, detail: "unused intermediate step".into() });
            }
            if !step.kind.produces_set() && !matches!(step.kind, StepKind::Count) {
                return Err(ProgramError::Malformed { step: i, detail: "terminal step before the end".into() });
            }
        }
        if self.steps[last].kind.produces_set() {
            return Err(ProgramError::Malformed { step: last, detail: "program ends in an object set".into() });
        }
        Ok(())
    }

    /// Longest chain of steps ending at the output; `Scene` counts 0.
    pub fn depth(&self) -> usize {
        let mut d = vec![0usize; self.steps.len()];
        for (i, s) in self.steps.iter().enumerate() {
            d[i] = match s.kind {
                StepKind::Scene => 0,
                _ => 1 + s.inputs.iter().map(|&j| d[j]).max().unwrap_or(0),
            };
        }
        d.last().copied().unwrap_or(0)
    }

    /// Concepts mentioned by filters, in first-seen order.
    pub fn filter_concepts(&self) -> Vec<ConceptId> {
        let mut out = Vec::new();
        for s in &self.steps {
            if let StepKind::Filter(cs) = &s.kind {
                for c in cs {
                    if !out.contains(c) {
                        out.push(*c);
                    }
                }
            }
        }
        out
    }

    /// Attributes read by Query or CompareAttr steps.
    pub fn queried_attrs(&self) -> Vec<AttrId> {
        self.steps
            .iter()
            .filter_map(|s| match s.kind {
                StepKind::Query(a) | StepKind::CompareAttr(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    /// Whether the program needs any judgment about attribute `a`.
    pub fn mentions_attr(&self, a: AttrId, schema: &AttributeSchema) -> bool {
        self.queried_attrs().contains(&a) || self.filter_concepts().iter().any(|&c| schema.attr_of(c) == a)
    }
}

/// Convenience: the depth of a program.
pub fn program_depth(program: &Program) -> usize {
    program.depth()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Answer {
    Concept(ConceptId),
    Integer(usize),
    Boolean(bool),
}

impl Answer {
    pub fn render(&self, schema: &AttributeSchema) -> String {
        match self {
            Answer::Concept(c) => schema.concept_name(*c).to_string(),
            Answer::Integer(n) => n.to_string(),
            Answer::Boolean(b) => if *b { "yes" } else { "no" }.to_string(),
        }
    }
}

/// The seven reported question categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    Query,
    Exist,
    Count,
    CountEq,
    CountGt,
    CountLt,
    CompareAttr,
}

impl QType {
    pub const ALL: [QType; 7] =
        [QType::Query, QType::Exist, QType::Count, QType::CountEq, QType::CountGt, QType::CountLt, QType::CompareAttr];

    pub fn name(&self) -> &'static str {
        match self {
            QType::Query => "query",
            QType::Exist => "exist",
            QType::Count => "count",
            QType::CountEq => "count_eq",
            QType::CountGt => "count_gt",
            QType::CountLt => "count_lt",
            QType::CompareAttr => "compare_attr",
        }
    }

    pub fn cmp(&self) -> Option<Cmp> {
        match self {
            QType::CountEq => Some(Cmp::Eq),
            QType::CountGt => Some(Cmp::Gt),
            QType::CountLt => Some(Cmp::Lt),
            _ => None,
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QType {
    type Err = ProgramError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QType::ALL.into_iter().find(|q| q.name() == s).ok_or_else(|| ProgramError::Json(format!("unknown question type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QASample {
    pub scene_id: u64,
    pub qtype: QType,
    pub program: Program,
    pub question_text: String,
    pub answer: Answer,
    pub depth: usize,
}

#[derive(Debug, Clone)]
enum Value {
    Set(Vec<bool>),
    Number(usize),
    Done(Answer),
}

fn singleton(set: &[bool], step: usize) -> Result<usize, ProgramError> {
    let members: Vec<usize> = set.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if members.len() != 1 {
        return Err(ProgramError::Ambiguous { step, found: members.len() });
    }
    Ok(members[0])
}

/// Hard-set execution on ground-truth attributes and positions.
pub fn brute_force_answer(scene: &Scene, program: &Program, schema: &AttributeSchema) -> Result<Answer, ProgramError> {
    let n = scene.objects.len();
    let mut values: Vec<Value> = Vec::with_capacity(program.steps.len());
    let set_of = |values: &[Value], slot: usize| -> Vec<bool> {
        match &values[slot] {
            Value::Set(s) => s.clone(),
            _ => unreachable!("validated program"),
        }
    };
    for (i, step) in program.steps.iter().enumerate() {
        let v = match &step.kind {
            StepKind::Scene => Value::Set(vec![true; n]),
            StepKind::Filter(cs) => {
                let mut s = set_of(&values, step.inputs[0]);
                for (j, o) in scene.objects.iter().enumerate() {
                    s[j] = s[j] && cs.iter().all(|&c| o.has(c, schema));
                }
                Value::Set(s)
            }
            StepKind::Relate(rel) => {
                let r = singleton(&set_of(&values, step.inputs[0]), i)?;
                let anchor = scene.objects[r].position;
                Value::Set(scene.objects.iter().enumerate().map(|(j, o)| j != r && rel.holds(o.position, anchor)).collect())
            }
            StepKind::Query(a) => {
                let r = singleton(&set_of(&values, step.inputs[0]), i)?;
                Value::Done(Answer::Concept(scene.objects[r].value(*a)))
            }
            StepKind::Exist => Value::Done(Answer::Boolean(set_of(&values, step.inputs[0]).iter().any(|&m| m))),
            StepKind::Count => Value::Number(set_of(&values, step.inputs[0]).iter().filter(|&&m| m).count()),
            StepKind::CompareAttr(a) => {
                let x = singleton(&set_of(&values, step.inputs[0]), i)?;
                let y = singleton(&set_of(&values, step.inputs[1]), i)?;
                Value::Done(Answer::Boolean(scene.objects[x].value(*a) == scene.objects[y].value(*a)))
            }
            StepKind::CompareCount(cmp) => {
                let num = |slot: usize| match values[slot] {
                    Value::Number(k) => k,
                    _ => unreachable!("validated program"),
                };
                Value::Done(Answer::Boolean(cmp.apply(num(step.inputs[0]), num(step.inputs[1]))))
            }
        };
        values.push(v);
    }
    match values.pop() {
        Some(Value::Done(a)) => Ok(a),
        Some(Value::Number(k)) => Ok(Answer::Integer(k)),
        _ => Err(ProgramError::Malformed { step: program.steps.len().saturating_sub(1), detail: "no answer".into() }),
    }
}
