//! Accuracy reports over datasets, per question type.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::concept::{ConceptSpace, JudgeMode, Judgment, LearnerJudge};
use crate::dataset::Dataset;
use crate::executor::{exec, predict, ExecError, Judge, OracleJudge, Phase};
use crate::program::QType;
use crate::scene::{AttributeSchema, BiasCondition, Perturbation};
use crate::tensor::Tape;

/// Report columns, in table order, with their short headings.
pub const COLUMNS: [(QType, &str); 7] = [
    (QType::Count, "Count"),
    (QType::Exist, "Exist"),
    (QType::CountEq, "Cnt="),
    (QType::CountGt, "Cnt>"),
    (QType::CountLt, "Cnt<"),
    (QType::CompareAttr, "Comp.Attr."),
    (QType::Query, "Query"),
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub scene_id: u64,
    pub qtype: QType,
    pub predicted: String,
    pub truth: String,
    pub correct: bool,
}

/// Which ablation components were active, in the table's abbreviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFlags {
    pub abs: bool,
    pub cc: bool,
    pub sl: bool,
}

impl ModeFlags {
    pub fn of(mode: JudgeMode) -> Self {
        Self { abs: mode.judgment == Judgment::Super, cc: mode.clustered, sl: mode.debiased }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: Option<String>,
    pub scenes: usize,
    pub questions: usize,
    pub conditions: Vec<BiasCondition>,
    pub perturbations: Vec<Perturbation>,
}

impl DatasetDescriptor {
    pub fn of(data: &Dataset) -> Self {
        let mut conditions = Vec::new();
        let mut perturbations: Vec<Perturbation> = Vec::new();
        for s in &data.scenes {
            if !conditions.contains(&s.condition) {
                conditions.push(s.condition);
            }
            for p in &s.perturbations {
                if !perturbations.contains(p) {
                    perturbations.push(*p);
                }
            }
        }
        Self { name: None, scenes: data.scenes.len(), questions: data.len(), conditions, perturbations }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Judgment label, e.g. `super+cc+sl`, or `oracle`.
    pub mode: String,
    pub flags: Option<ModeFlags>,
    pub dataset: DatasetDescriptor,
    /// Hash of the evaluated checkpoint, when there is one.
    pub checkpoint_hash: Option<String>,
    pub overall: Tally,
    pub per_qtype: BTreeMap<QType, Tally>,
    pub uniform_fallbacks: usize,
    pub debias_fallbacks: usize,
    /// One entry per sample, in dataset order.
    pub outcomes: Vec<Outcome>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy().unwrap_or(0.0)
    }

    pub fn qtype_accuracy(&self, q: QType) -> Option<f64> {
        self.per_qtype.get(&q).and_then(Tally::accuracy)
    }

    /// Recounts the tallies from the stored outcomes.
    pub fn recount(&self) -> (Tally, BTreeMap<QType, Tally>) {
        let mut overall = Tally::default();
        let mut per = BTreeMap::new();
        for o in &self.outcomes {
            for t in [&mut overall, per.entry(o.qtype).or_insert_with(Tally::default)] {
                t.total += 1;
                t.correct += o.correct as usize;
            }
        }
        (overall, per)
    }

    /// One-line table: overall, then each column in [`COLUMNS`] order.
    pub fn table_row(&self) -> String {
        let fmt = |a: Option<f64>| a.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut cells = vec![format!("{:<14}", self.mode), format!("{:>7}", fmt(self.overall.accuracy()))];
        for (q, _) in COLUMNS {
            cells.push(format!("{:>10}", fmt(self.qtype_accuracy(q))));
        }
        cells.join(" ")
    }

    pub fn table_header() -> String {
        let mut cells = vec![format!("{:<14}", "mode"), format!("{:>7}", "Overall")];
        for (_, h) in COLUMNS {
            cells.push(format!("{h:>10}"));
        }
        cells.join(" ")
    }
}

/// Sample indices grouped by scene, scenes in first-appearance order.
pub fn group_by_scene(data: &Dataset) -> Vec<(u64, Vec<usize>)> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        groups
            .entry(s.scene_id)
            .or_insert_with(|| {
                order.push(s.scene_id);
                Vec::new()
            })
            .push(i);
    }
    order.into_iter().map(|id| (id, groups.remove(&id).expect("grouped"))).collect()
}

fn evaluate_with(
    label: String,
    flags: Option<ModeFlags>,
    data: &Dataset,
    schema: &AttributeSchema,
    mut run: impl FnMut(
        &mut Tape,
        u64,
        &[usize],
        &mut dyn FnMut(&mut Tape, &mut dyn Judge, usize) -> Result<(), ExecError>,
    ) -> Result<usize, ExecError>,
) -> Result<EvalReport, ExecError> {
    let mut outcomes: Vec<Option<Outcome>> = vec![None; data.samples.len()];
    let mut uniform_fallbacks = 0;
    let mut debias_fallbacks = 0;
    for (scene_id, idxs) in group_by_scene(data) {
        let scene = data.scene(scene_id).expect("dataset is consistent");
        let mut tape = Tape::new();
        let mut record = |tape: &mut Tape, judge: &mut dyn Judge, i: usize| -> Result<(), ExecError> {
            let s = &data.samples[i];
            let out = exec(tape, judge, scene, &s.program, Phase::Eval, false)?;
            let pred = predict(tape, &out);
            uniform_fallbacks += out.uniform_fallback as usize;
            outcomes[i] = Some(Outcome {
                scene_id,
                qtype: s.qtype,
                predicted: pred.render(schema),
                truth: s.answer.render(schema),
                correct: pred == s.answer,
            });
            Ok(())
        };
        debias_fallbacks += run(&mut tape, scene_id, &idxs, &mut record)?;
    }
    let mut report = EvalReport {
        mode: label,
        flags,
        dataset: DatasetDescriptor::of(data),
        checkpoint_hash: None,
        overall: Tally::default(),
        per_qtype: BTreeMap::new(),
        uniform_fallbacks,
        debias_fallbacks,
        outcomes: outcomes.into_iter().map(|o| o.expect("every sample evaluated")).collect(),
    };
    let (overall, per) = report.recount();
    report.overall = overall;
    report.per_qtype = per;
    Ok(report)
}

/// Evaluates the learner under `mode` on every sample of `data`.
pub fn evaluate(space: &ConceptSpace, mode: JudgeMode, data: &Dataset) -> Result<EvalReport, ExecError> {
    evaluate_with(mode.label(), Some(ModeFlags::of(mode)), data, space.schema(), |tape, scene_id, idxs, record| {
        let scene = data.scene(scene_id).expect("dataset is consistent");
        let mut judge = LearnerJudge::new(space, mode, true)?;
        judge.bind_scene(tape, scene)?;
        for &i in idxs {
            record(tape, &mut judge, i)?;
        }
        Ok(judge.debias_fallbacks())
    })
}

/// Evaluates with ground-truth judgments; every answer should be right.
pub fn evaluate_oracle(data: &Dataset, schema: &AttributeSchema) -> Result<EvalReport, ExecError> {
    evaluate_with("oracle".into(), None, data, schema, |tape, scene_id, idxs, record| {
        let scene = data.scene(scene_id).expect("dataset is consistent");
        let mut judge = OracleJudge::new(scene, schema);
        for &i in idxs {
            record(tape, &mut judge, i)?;
        }
        Ok(0)
    })
}
