//! Differentiable execution of programs over per-object attention masks.
//!
//! Set-valued steps carry a mask in `[0,1]^n`. Membership probabilities come
//! from a [`Judge`], so the same interpreter runs against ground truth
//! ([`OracleJudge`]), the learner, or the shortcut heads.

use serde::Serialize;
use thiserror::Error;

use crate::program::{Answer, Cmp, Program, ProgramError, QASample, StepKind};
use crate::scene::{AttrId, AttributeSchema, ConceptId, Scene};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Temperature of the soft `>`/`<` count comparison.
pub const TAU_CMP: f64 = 0.25;
/// Width of the soft `=` count comparison.
pub const TAU_EQ: f64 = 0.5;
/// Probability floor inside `-log p`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("answer type {answer} does not match program output {output}")]
    AnswerType { answer: &'static str, output: &'static str },
}

/// Source of per-object concept judgments for one scene.
pub trait Judge {
    /// Probability that each object has concept `c`, as an n-vector.
    fn membership(&mut self, tape: &mut Tape, c: ConceptId) -> Result<Var, ExecError>;
    /// Row-stochastic n×V matrix over the returned vocabulary.
    fn attribute_distribution(&mut self, tape: &mut Tape, a: AttrId) -> Result<(Var, Vec<ConceptId>), ExecError>;
}

/// Ground-truth one-hot judgments.
pub struct OracleJudge<'a> {
    scene: &'a Scene,
    schema: &'a AttributeSchema,
}

impl<'a> OracleJudge<'a> {
    pub fn new(scene: &'a Scene, schema: &'a AttributeSchema) -> Self {
        Self { scene, schema }
    }
}

impl Judge for OracleJudge<'_> {
    fn membership(&mut self, tape: &mut Tape, c: ConceptId) -> Result<Var, ExecError> {
        let v = self.scene.objects.iter().map(|o| if o.has(c, self.schema) { 1.0 } else { 0.0 }).collect();
        Ok(tape.constant_vector(v))
    }

    fn attribute_distribution(&mut self, tape: &mut Tape, a: AttrId) -> Result<(Var, Vec<ConceptId>), ExecError> {
        let vocab = self.schema.vocab(a);
        let n = self.scene.objects.len();
        let mut data = vec![0.0; n * vocab.len()];
        for (i, o) in self.scene.objects.iter().enumerate() {
            data[i * vocab.len() + self.schema.local_index(o.value(a))] = 1.0;
        }
        Ok((tape.constant(Tensor::matrix(n, vocab.len(), data)?), vocab))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Soft counts.
    Train,
    /// Counts binarize each mask entry at 0.5 before summing.
    Eval,
}

#[derive(Debug, Clone)]
pub enum Output {
    Distribution {
        probs: Var,
        vocab: Vec<ConceptId>,
    },
    Count(Var),
    /// `complement` is `1 - p`, computed without cancellation where the step allows.
    Probability {
        p: Var,
        complement: Var,
    },
}

impl Output {
    fn kind(&self) -> &'static str {
        match self {
            Output::Distribution { .. } => "distribution",
            Output::Count(_) => "count",
            Output::Probability { .. } => "probability",
        }
    }
}

/// Per-step values, for debugging dumps.
#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub step: usize,
    pub kind: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExecOutput {
    pub output: Output,
    /// A query met an all-zero mask and answered uniformly.
    pub uniform_fallback: bool,
    pub trace: Vec<TraceStep>,
}

#[derive(Clone)]
enum Slot {
    Mask(Var),
    Count(Var),
    Final(Output),
}

/// 0/1 matrix with `r[i][j] = 1` when object i stands in `rel` to object j.
fn relation_matrix(scene: &Scene, rel: crate::program::Relation) -> Tensor {
    let n = scene.objects.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && rel.holds(scene.objects[i].position, scene.objects[j].position) {
                data[i * n + j] = 1.0;
            }
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

fn query(tape: &mut Tape, judge: &mut dyn Judge, mask: Var, attr: AttrId, fallback: &mut bool) -> Result<(Var, Vec<ConceptId>), ExecError> {
    let (dist, vocab) = judge.attribute_distribution(tape, attr)?;
    if tape.value(mask).data().iter().sum::<f64>() <= 0.0 {
        *fallback = true;
        let v = vocab.len();
        return Ok((tape.constant_vector(vec![1.0 / v as f64; v]), vocab));
    }
    let w = tape.sum_normalize(mask)?;
    let mixed = tape.matvec_t(dist, w)?;
    Ok((tape.sum_normalize(mixed)?, vocab))
}

/// Runs `program` on `scene`, recording every operation on `tape`.
pub fn exec(
    tape: &mut Tape,
    judge: &mut dyn Judge,
    scene: &Scene,
    program: &Program,
    phase: Phase,
    trace: bool,
) -> Result<ExecOutput, ExecError> {
    let n = scene.objects.len();
    let mut slots: Vec<Slot> = Vec::with_capacity(program.steps.len());
    let mut fallback = false;
    let mut steps_trace = Vec::new();
    for (idx, step) in program.steps.iter().enumerate() {
        let mask_in = |k: usize| -> Result<Var, ExecError> {
            match slots.get(step.inputs[k]) {
                Some(Slot::Mask(m)) => Ok(*m),
                _ => Err(ExecError::Program(ProgramError::Malformed { step: idx, detail: "expected a set input".into() })),
            }
        };
        let count_in = |k: usize| -> Result<Var, ExecError> {
            match slots.get(step.inputs[k]) {
                Some(Slot::Count(c)) => Ok(*c),
                _ => Err(ExecError::Program(ProgramError::Malformed { step: idx, detail: "expected a count input".into() })),
            }
        };
        let slot = match &step.kind {
            StepKind::Scene => Slot::Mask(tape.constant_vector(vec![1.0; n])),
            StepKind::Filter(cs) => {
                let mut m = mask_in(0)?;
                for &c in cs {
                    let p = judge.membership(tape, c)?;
                    m = tape.mul(m, p)?;
                }
                Slot::Mask(m)
            }
            StepKind::Relate(rel) => {
                let r = tape.sum_normalize(mask_in(0)?)?;
                let rm = tape.constant(relation_matrix(scene, *rel));
                Slot::Mask(tape.matvec(rm, r)?)
            }
            StepKind::Query(a) => {
                let (probs, vocab) = query(tape, judge, mask_in(0)?, *a, &mut fallback)?;
                Slot::Final(Output::Distribution { probs, vocab })
            }
            StepKind::Exist => {
                let p = tape.max(mask_in(0)?)?;
                Slot::Final(Output::Probability { p, complement: tape.one_minus(p)? })
            }
            StepKind::Count => {
                let m = mask_in(0)?;
                let c = match phase {
                    Phase::Train => tape.sum(m)?,
                    Phase::Eval => {
                        let hard = tape.value(m).data().iter().filter(|&&x| x > 0.5).count();
                        tape.constant_scalar(hard as f64)
                    }
                };
                Slot::Count(c)
            }
            StepKind::CompareAttr(a) => {
                let (qa, _) = query(tape, judge, mask_in(0)?, *a, &mut fallback)?;
                let (qb, _) = query(tape, judge, mask_in(1)?, *a, &mut fallback)?;
                let p = tape.dot(qa, qb)?;
                Slot::Final(Output::Probability { p, complement: tape.one_minus(p)? })
            }
            StepKind::CompareCount(cmp) => {
                let (a, b) = (count_in(0)?, count_in(1)?);
                let (p, complement) = match cmp {
                    Cmp::Gt | Cmp::Lt => {
                        let d = if *cmp == Cmp::Gt { tape.sub(a, b)? } else { tape.sub(b, a)? };
                        let z = tape.scale(d, 1.0 / TAU_CMP)?;
                        let nz = tape.scale(d, -1.0 / TAU_CMP)?;
                        (tape.sigmoid(z)?, tape.sigmoid(nz)?)
                    }
                    Cmp::Eq => {
                        let d = tape.sub(a, b)?;
                        let sq = tape.mul(d, d)?;
                        let e = tape.scale(sq, -1.0 / TAU_EQ)?;
                        (tape.exp(e)?, tape.neg_expm1(e)?)
                    }
                };
                Slot::Final(Output::Probability { p, complement })
            }
        };
        if trace {
            let var = match &slot {
                Slot::Mask(v) | Slot::Count(v) => *v,
                Slot::Final(Output::Distribution { probs, .. }) => *probs,
                Slot::Final(Output::Count(v)) | Slot::Final(Output::Probability { p: v, .. }) => *v,
            };
            steps_trace.push(TraceStep { step: idx, kind: step.kind.name().to_string(), values: tape.value(var).data().to_vec() });
        }
        slots.push(slot);
    }
    let output = match slots.pop() {
        Some(Slot::Final(o)) => o,
        Some(Slot::Count(c)) => Output::Count(c),
        _ => {
            return Err(ExecError::Program(ProgramError::Malformed {
                step: program.steps.len().saturating_sub(1),
                detail: "program ends in a set".into(),
            }))
        }
    };
    Ok(ExecOutput { output, uniform_fallback: fallback, trace: steps_trace })
}

/// Discrete answer read off an execution: argmax for distributions,
/// rounding for counts and a 0.5 threshold for probabilities.
pub fn predict(tape: &Tape, out: &ExecOutput) -> Answer {
    match &out.output {
        Output::Distribution { probs, vocab } => {
            let d = tape.value(*probs).data();
            let mut best = 0;
            for (i, &x) in d.iter().enumerate() {
                if x > d[best] {
                    best = i;
                }
            }
            Answer::Concept(vocab[best])
        }
        Output::Count(c) => Answer::Integer(tape.scalar(*c).round().max(0.0) as usize),
        Output::Probability { p, .. } => Answer::Boolean(tape.scalar(*p) > 0.5),
    }
}

/// Loss for one sample plus whether the probability floor was hit.
pub fn loss(tape: &mut Tape, out: &ExecOutput, answer: &Answer) -> Result<(Var, bool), ExecError> {
    let mismatch = |answer: &Answer| ExecError::AnswerType {
        answer: match answer {
            Answer::Concept(_) => "concept",
            Answer::Integer(_) => "integer",
            Answer::Boolean(_) => "boolean",
        },
        output: out.output.kind(),
    };
    let p = match (&out.output, answer) {
        (Output::Count(c), Answer::Integer(k)) => {
            let target = tape.constant_scalar(*k as f64);
            return Ok((tape.sq_diff(*c, target)?, false));
        }
        (Output::Distribution { probs, vocab }, Answer::Concept(c)) => match vocab.iter().position(|v| v == c) {
            Some(i) => tape.index(*probs, i)?,
            None => tape.constant_scalar(0.0),
        },
        (Output::Probability { p, .. }, Answer::Boolean(true)) => *p,
        (Output::Probability { complement, .. }, Answer::Boolean(false)) => *complement,
        _ => return Err(mismatch(answer)),
    };
    let clamped = tape.scalar(p) < LOG_FLOOR;
    let p = tape.clamp_min(p, LOG_FLOOR)?;
    let l = tape.log(p)?;
    Ok((tape.scale(l, -1.0)?, clamped))
}

/// Executes a sample in eval phase and reports whether it was answered correctly.
pub fn answer_sample(judge: &mut dyn Judge, scene: &Scene, sample: &QASample) -> Result<(Answer, bool), ExecError> {
    let mut tape = Tape::new();
    let out = exec(&mut tape, judge, scene, &sample.program, Phase::Eval, false)?;
    let pred = predict(&tape, &out);
    let ok = pred == sample.answer;
    Ok((pred, ok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::tests::{scene_with, worked_example};
    use crate::program::{brute_force_answer, ProgramStep, Relation};

    /// Judge returning fixed membership vectors, for step-level checks.
    struct Fixed(Vec<(ConceptId, Vec<f64>)>);

    impl Judge for Fixed {
        fn membership(&mut self, tape: &mut Tape, c: ConceptId) -> Result<Var, ExecError> {
            let v = self.0.iter().find(|(k, _)| *k == c).map(|(_, v)| v.clone()).expect("fixed concept");
            Ok(tape.constant_vector(v))
        }
        fn attribute_distribution(&mut self, tape: &mut Tape, _a: AttrId) -> Result<(Var, Vec<ConceptId>), ExecError> {
            let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            Ok((tape.constant(t), vec![ConceptId(8), ConceptId(9)]))
        }
    }

    fn prog(steps: Vec<(StepKind, Vec<usize>)>) -> Program {
        Program::new(steps.into_iter().map(|(k, i)| ProgramStep::new(k, i)).collect()).unwrap()
    }

    #[test]
    fn count_all_objects() {
        let (scene, schema) = scene_with(&[
            (&["red"], [0.1, 0.1]),
            (&["red"], [0.2, 0.1]),
            (&["red"], [0.3, 0.1]),
            (&["red"], [0.4, 0.1]),
            (&["red"], [0.5, 0.1]),
        ]);
        let p = prog(vec![(StepKind::Scene, vec![]), (StepKind::Count, vec![0])]);
        let mut tape = Tape::new();
        let out = exec(&mut tape, &mut OracleJudge::new(&scene, &schema), &scene, &p, Phase::Train, false).unwrap();
        let Output::Count(c) = out.output else { panic!() };
        assert_eq!(tape.scalar(c), 5.0);
    }

    #[test]
    fn filter_multiplies_and_count_modes() {
        let (scene, _) = scene_with(&[(&["red"], [0.1, 0.1]), (&["red"], [0.5, 0.1]), (&["red"], [0.9, 0.1])]);
        let c = ConceptId(1);
        let p = prog(vec![(StepKind::Scene, vec![]), (StepKind::Filter(vec![c]), vec![0]), (StepKind::Count, vec![1])]);
        let mut judge = Fixed(vec![(c, vec![0.9, 0.6, 0.2])]);
        let mut tape = Tape::new();
        let out = exec(&mut tape, &mut judge, &scene, &p, Phase::Train, true).unwrap();
        let Output::Count(v) = out.output else { panic!() };
        assert!((tape.scalar(v) - 1.7).abs() < 1e-12);
        assert_eq!(out.trace[1].values, vec![0.9, 0.6, 0.2]);
        let out = exec(&mut tape, &mut judge, &scene, &p, Phase::Eval, false).unwrap();
        assert_eq!(predict(&tape, &out), Answer::Integer(2));
    }

    #[test]
    fn relate_mixes_reference_rows() {
        let (scene, _) = scene_with(&[(&["red"], [0.1, 0.5]), (&["red"], [0.5, 0.5]), (&["red"], [0.9, 0.5])]);
        let c = ConceptId(1);
        let p = prog(vec![
            (StepKind::Scene, vec![]),
            (StepKind::Filter(vec![c]), vec![0]),
            (StepKind::Relate(Relation::Left), vec![1]),
            (StepKind::Exist, vec![2]),
        ]);
        let mut tape = Tape::new();
        let out = exec(&mut tape, &mut Fixed(vec![(c, vec![0.0, 0.5, 0.5])]), &scene, &p, Phase::Train, true).unwrap();
        // references 1 and 2 at weight 1/2: left of 1 is {0}, left of 2 is {0,1}
        assert_eq!(out.trace[2].values, vec![1.0, 0.5, 0.0]);
        let out = exec(&mut tape, &mut Fixed(vec![(c, vec![1.0, 0.0, 0.0])]), &scene, &p, Phase::Train, true).unwrap();
        assert_eq!(out.trace[2].values, vec![0.0, 0.0, 0.0]);
        let Output::Probability { p: e, .. } = out.output else { panic!() };
        assert_eq!(tape.scalar(e), 0.0);
    }

    #[test]
    fn query_zero_mask_is_uniform_and_flagged() {
        let (scene, _) = scene_with(&[(&["red"], [0.1, 0.5]), (&["red"], [0.5, 0.5])]);
        let c = ConceptId(1);
        let p = prog(vec![(StepKind::Scene, vec![]), (StepKind::Filter(vec![c]), vec![0]), (StepKind::Query(AttrId(2)), vec![1])]);
        let mut tape = Tape::new();
        let out = exec(&mut tape, &mut Fixed(vec![(c, vec![0.0, 0.0])]), &scene, &p, Phase::Train, false).unwrap();
        assert!(out.uniform_fallback);
        let Output::Distribution { probs, .. } = out.output else { panic!() };
        assert_eq!(tape.value(probs).data(), &[0.5, 0.5]);
        let out = exec(&mut tape, &mut Fixed(vec![(c, vec![1.0, 1.0])]), &scene, &p, Phase::Train, false).unwrap();
        let Output::Distribution { probs, .. } = out.output else { panic!() };
        assert_eq!(tape.value(probs).data(), &[0.5, 0.5]);
    }

    #[test]
    fn compare_count_at_equality() {
        let (scene, schema) =
            scene_with(&[(&["red", "cube"], [0.1, 0.5]), (&["blue", "cube"], [0.5, 0.5]), (&["blue", "sphere"], [0.9, 0.5])]);
        let red = schema.lookup_concept("red").unwrap();
        let sphere = schema.lookup_concept("sphere").unwrap();
        for (cmp, want) in [(Cmp::Eq, 1.0), (Cmp::Gt, 0.5), (Cmp::Lt, 0.5)] {
            let p = prog(vec![
                (StepKind::Scene, vec![]),
                (StepKind::Filter(vec![red]), vec![0]),
                (StepKind::Count, vec![1]),
                (StepKind::Filter(vec![sphere]), vec![0]),
                (StepKind::Count, vec![3]),
                (StepKind::CompareCount(cmp), vec![2, 4]),
            ]);
            let mut tape = Tape::new();
            let out = exec(&mut tape, &mut OracleJudge::new(&scene, &schema), &scene, &p, Phase::Train, false).unwrap();
            let Output::Probability { p: v, .. } = out.output else { panic!() };
            assert_eq!(tape.scalar(v), want);
        }
    }

    #[test]
    fn one_gap_is_confident() {
        assert!(1.0 / (1.0 + (-1.0f64 / TAU_CMP).exp()) >= 0.98);
        assert!((-1.0f64 / TAU_EQ).exp() < 0.5);
    }

    #[test]
    fn oracle_worked_example() {
        let (scene, schema) = scene_with(&[
            (&["blue", "metal", "cube", "large"], [0.8, 0.5]),
            (&["red", "rubber", "sphere", "small"], [0.2, 0.5]),
            (&["green", "rubber", "sphere", "large"], [0.9, 0.1]),
        ]);
        let p = worked_example(&schema);
        let mut tape = Tape::new();
        let out = exec(&mut tape, &mut OracleJudge::new(&scene, &schema), &scene, &p, Phase::Eval, false).unwrap();
        assert_eq!(predict(&tape, &out), brute_force_answer(&scene, &p, &schema).unwrap());
    }

    #[test]
    fn losses() {
        let mut tape = Tape::new();
        let c = tape.constant_scalar(3.0);
        let out = ExecOutput { output: Output::Count(c), uniform_fallback: false, trace: vec![] };
        let (l, _) = loss(&mut tape, &out, &Answer::Integer(3)).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let p = tape.constant_scalar(0.5);
        let complement = tape.one_minus(p).unwrap();
        let out = ExecOutput { output: Output::Probability { p, complement }, uniform_fallback: false, trace: vec![] };
        for truth in [true, false] {
            let (l, _) = loss(&mut tape, &out, &Answer::Boolean(truth)).unwrap();
            assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let d = tape.constant_vector(vec![1.0, 0.0]);
        let out = ExecOutput {
            output: Output::Distribution { probs: d, vocab: vec![ConceptId(8), ConceptId(9)] },
            uniform_fallback: false,
            trace: vec![],
        };
        let (l, clamped) = loss(&mut tape, &out, &Answer::Concept(ConceptId(8))).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert!(!clamped);
        let (l, clamped) = loss(&mut tape, &out, &Answer::Concept(ConceptId(9))).unwrap();
        assert!(clamped);
        assert!((tape.scalar(l) + LOG_FLOOR.ln()).abs() < 1e-9);
        assert!(loss(&mut tape, &out, &Answer::Integer(1)).is_err());
    }
}
