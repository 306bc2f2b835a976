//! Shared checks for the integration and acceptance suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsa::concept::{ConceptSpace, JudgeMode, LearnerConfig, LearnerJudge};
use vsa::dataset::{build_dataset, Dataset, DatasetSpec};
use vsa::executor::{exec, OracleJudge, Phase};
use vsa::program::{brute_force_answer, QType, QTypeMix};
use vsa::scene::{make_universe, AttributeSchema, BiasCondition, Universe, UniverseConfig};
use vsa::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use vsa::trainer::loss_for_sample;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Shape {
    Scalar,
    Vec(usize),
    Mat(usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    var: Var,
    shape: Shape,
    /// Every entry is strictly positive.
    positive: bool,
}

/// A random expression graph over three parameters, rebuilt identically
/// from its seed so it can be re-evaluated under perturbed parameters.
pub struct RandomGraph {
    pub seed: u64,
    pub store: ParamStore,
    pub params: Vec<ParamId>,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let a = store.register("a", Tensor::vector(draw(4))).unwrap();
        let b = store.register("b", Tensor::vector(draw(3))).unwrap();
        let m = store.register("m", Tensor::matrix(3, 4, draw(12)).unwrap()).unwrap();
        Self { seed, store, params: vec![a, b, m] }
    }

    /// Records the graph and returns the scalar output.
    pub fn build(&self, tape: &mut Tape) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xa5a5);
        let shapes = [Shape::Vec(4), Shape::Vec(3), Shape::Mat(3, 4)];
        let mut pool: Vec<Node> = self
            .params
            .iter()
            .zip(shapes)
            .map(|(&id, shape)| Node { var: tape.param(id, self.store.get(id)), shape, positive: false })
            .collect();
        let steps = rng.random_range(4..12);
        for _ in 0..steps {
            if let Some(n) = random_op(tape, &pool, &mut rng) {
                pool.push(n);
            }
        }
        // Scalarize the three most recent nodes and mix them.
        let tail: Vec<Node> = pool.iter().rev().take(3).copied().collect();
        let parts: Vec<Var> = tail
            .iter()
            .map(|n| match n.shape {
                Shape::Scalar => n.var,
                _ => tape.sum(n.var).unwrap(),
            })
            .collect();
        let s = tape.stack(&parts).unwrap();
        let w = tape.constant_vector((0..parts.len()).map(|i| 1.0 + 0.5 * i as f64).collect());
        tape.dot(s, w).unwrap()
    }

    pub fn value(&self) -> f64 {
        let mut tape = Tape::new();
        let out = self.build(&mut tape);
        tape.scalar(out)
    }

    /// Largest relative error between the tape gradient and central differences.
    pub fn max_rel_error(&mut self, floor: f64) -> f64 {
        let mut tape = Tape::new();
        let out = self.build(&mut tape);
        let grads = tape.backward(out).unwrap();
        let mut worst = 0.0f64;
        for &id in &self.params.clone() {
            let analytic: Vec<f64> = grads.get(id).map_or_else(|| vec![0.0; self.store.get(id).len()], |g| g.data().to_vec());
            for (k, &a) in analytic.iter().enumerate() {
                let x0 = self.store.get(id).data()[k];
                self.store.get_mut(id).data_mut()[k] = x0 + FD_STEP;
                let up = self.value();
                self.store.get_mut(id).data_mut()[k] = x0 - FD_STEP;
                let down = self.value();
                self.store.get_mut(id).data_mut()[k] = x0;
                worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP), floor));
            }
        }
        worst
    }
}

fn pick<'a>(pool: &'a [Node], rng: &mut ChaCha8Rng, ok: impl Fn(&Node) -> bool) -> Option<&'a Node> {
    let c: Vec<&Node> = pool.iter().filter(|n| ok(n)).collect();
    (!c.is_empty()).then(|| c[rng.random_range(0..c.len())])
}

fn random_op(tape: &mut Tape, pool: &[Node], rng: &mut ChaCha8Rng) -> Option<Node> {
    let any = |_: &Node| true;
    let tensor = |n: &Node| n.shape != Shape::Scalar;
    let vec = |n: &Node| matches!(n.shape, Shape::Vec(_));
    let node = |var, shape, positive| Some(Node { var, shape, positive });
    match rng.random_range(0..20) {
        0 => {
            let a = pick(pool, rng, any)?;
            let s = rng.random_range(-2.0..2.0);
            node(tape.scale(a.var, s).ok()?, a.shape, false)
        }
        1 => {
            let a = pick(pool, rng, any)?;
            node(tape.add_scalar(a.var, rng.random_range(-1.0..1.0)).ok()?, a.shape, false)
        }
        2 => {
            let a = pick(pool, rng, any)?;
            node(tape.sigmoid(a.var).ok()?, a.shape, true)
        }
        3 => {
            let a = pick(pool, rng, any)?;
            let s = tape.sigmoid(a.var).ok()?;
            node(tape.exp(s).ok()?, a.shape, true)
        }
        4 => {
            let a = pick(pool, rng, |n| n.positive)?;
            node(tape.log(a.var).ok()?, a.shape, false)
        }
        5 => {
            let a = pick(pool, rng, any)?;
            node(tape.one_minus(a.var).ok()?, a.shape, false)
        }
        6 | 7 => {
            let a = *pick(pool, rng, any)?;
            let b = pick(pool, rng, |n| n.shape == a.shape)?;
            let v = match rng.random_range(0..3) {
                0 => tape.add(a.var, b.var).ok()?,
                1 => tape.sub(a.var, b.var).ok()?,
                _ => tape.mul(a.var, b.var).ok()?,
            };
            node(v, a.shape, false)
        }
        8 => {
            let a = *pick(pool, rng, tensor)?;
            let b = pick(pool, rng, |n| n.shape == a.shape)?;
            node(tape.sq_diff(a.var, b.var).ok()?, Shape::Scalar, false)
        }
        9 => {
            let a = *pick(pool, rng, vec)?;
            let b = pick(pool, rng, |n| n.shape == a.shape)?;
            node(tape.dot(a.var, b.var).ok()?, Shape::Scalar, false)
        }
        10 => {
            let a = pick(pool, rng, tensor)?;
            node(tape.softmax(a.var).ok()?, a.shape, true)
        }
        11 => {
            let a = pick(pool, rng, |n| n.positive && n.shape != Shape::Scalar)?;
            node(tape.sum_normalize(a.var).ok()?, a.shape, true)
        }
        12 => {
            let a = pick(pool, rng, tensor)?;
            node(tape.normalize_rows(a.var).ok()?, a.shape, false)
        }
        13 => {
            let a = pick(pool, rng, vec)?;
            node(tape.l2norm(a.var).ok()?, Shape::Scalar, true)
        }
        14 => {
            let m = *pick(pool, rng, |n| matches!(n.shape, Shape::Mat(..)))?;
            let Shape::Mat(r, c) = m.shape else { unreachable!() };
            if rng.random_bool(0.5) {
                let x = pick(pool, rng, |n| n.shape == Shape::Vec(c))?;
                node(tape.matvec(m.var, x.var).ok()?, Shape::Vec(r), false)
            } else {
                let x = pick(pool, rng, |n| n.shape == Shape::Vec(r))?;
                node(tape.matvec_t(m.var, x.var).ok()?, Shape::Vec(c), false)
            }
        }
        15 => {
            let a = *pick(pool, rng, |n| matches!(n.shape, Shape::Mat(..)))?;
            let Shape::Mat(r, c) = a.shape else { unreachable!() };
            let b = pick(pool, rng, |n| matches!(n.shape, Shape::Mat(_, cc) if cc == c))?;
            let Shape::Mat(r2, _) = b.shape else { unreachable!() };
            let v = if rng.random_bool(0.5) { tape.matmul_nt(a.var, b.var).ok()? } else { tape.cdist(a.var, b.var).ok()? };
            node(v, Shape::Mat(r, r2), false)
        }
        16 => {
            let m = *pick(pool, rng, |n| matches!(n.shape, Shape::Mat(..)))?;
            let Shape::Mat(_, c) = m.shape else { unreachable!() };
            let v = pick(pool, rng, |n| n.shape == Shape::Vec(c))?;
            let out = if rng.random_bool(0.5) { tape.add_row(m.var, v.var).ok()? } else { tape.mul_row(m.var, v.var).ok()? };
            node(out, m.shape, false)
        }
        17 => {
            let m = *pick(pool, rng, |n| matches!(n.shape, Shape::Mat(..)))?;
            let Shape::Mat(r, c) = m.shape else { unreachable!() };
            match rng.random_range(0..3) {
                0 => node(tape.select_column(m.var, rng.random_range(0..c)).ok()?, Shape::Vec(r), m.positive),
                1 => {
                    let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..r)).collect();
                    node(tape.rows(m.var, &idx).ok()?, m.shape, m.positive)
                }
                _ => node(tape.element(m.var, rng.random_range(0..r), rng.random_range(0..c)).ok()?, Shape::Scalar, m.positive),
            }
        }
        18 => {
            let a = *pick(pool, rng, tensor)?;
            let s = pick(pool, rng, |n| n.shape == Shape::Scalar)?;
            node(tape.scale_by(a.var, s.var).ok()?, a.shape, false)
        }
        _ => {
            let a = pick(pool, rng, vec)?;
            if rng.random_bool(0.5) {
                node(tape.max(a.var).ok()?, Shape::Scalar, a.positive)
            } else {
                let Shape::Vec(n) = a.shape else { unreachable!() };
                node(tape.index(a.var, rng.random_range(0..n)).ok()?, Shape::Scalar, a.positive)
            }
        }
    }
}

/// A universe and a dataset of one question type.
pub fn typed_data(q: QType, scenes: usize, seed: u64) -> (Universe, Dataset) {
    let u = make_universe(seed, UniverseConfig::default()).unwrap();
    let spec = DatasetSpec {
        condition: BiasCondition::Uniform,
        scenes,
        questions_per_scene: 1,
        mix: QTypeMix::only(q),
        seed,
        ..Default::default()
    };
    let d = build_dataset(&u, &spec).unwrap();
    (u, d)
}

/// A randomly initialized learner; frozen when `mode` needs a hierarchy.
pub fn random_space(schema: &AttributeSchema, feature_dim: usize, mode: JudgeMode, seed: u64) -> ConceptSpace {
    let mut space = ConceptSpace::new(schema.clone(), LearnerConfig::default(), feature_dim, seed).unwrap();
    let id = space.prior_id();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in space.store_mut().get_mut(id).data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    if mode != JudgeMode::MIXTURE {
        for c in schema.concepts() {
            space.store_mut().get_mut(id).row_mut(c.0)[schema.attr_of(c).0] += 4.0;
        }
        space.freeze_hierarchy().unwrap();
    }
    space
}

fn sample_loss(space: &ConceptSpace, mode: JudgeMode, data: &Dataset, i: usize) -> (Tape, Var) {
    let s = &data.samples[i];
    let scene = data.scene(s.scene_id).unwrap();
    let mut tape = Tape::new();
    let mut judge = LearnerJudge::new(space, mode, false).unwrap();
    let k = judge.bind_scene(&mut tape, scene).unwrap();
    judge.select(k);
    let (l, _, _) = loss_for_sample(&mut tape, &mut judge, scene, s).unwrap();
    (tape, l)
}

/// Largest relative error over `coords` random parameter coordinates of the
/// learner, for the training loss of sample `i`.
pub fn exec_grad_error(space: &mut ConceptSpace, mode: JudgeMode, data: &Dataset, i: usize, coords: usize, seed: u64) -> f64 {
    let ids = if mode == JudgeMode::MIXTURE { space.theta_ids() } else { space.map_embed_ids() };
    let (tape, l) = sample_loss(space, mode, data, i);
    let grads = tape.backward(l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Half the probes go where the gradient is nonzero, so they are informative.
    let live: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| {
            let g = grads.get(id).map(|g| g.data().to_vec()).unwrap_or_default();
            g.into_iter().enumerate().filter(|(_, x)| *x != 0.0).map(move |(k, _)| (id, k))
        })
        .collect();
    let mut worst = 0.0f64;
    for probe in 0..coords {
        let (id, k) = if probe % 2 == 0 && !live.is_empty() {
            live[rng.random_range(0..live.len())]
        } else {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..space.store().get(id).len()))
        };
        let a = grads.get(id).map_or(0.0, |g| g.data()[k]);
        let x0 = space.store().get(id).data()[k];
        space.store_mut().get_mut(id).data_mut()[k] = x0 + FD_STEP;
        let (t, v) = sample_loss(space, mode, data, i);
        let up = t.scalar(v);
        space.store_mut().get_mut(id).data_mut()[k] = x0 - FD_STEP;
        let (t, v) = sample_loss(space, mode, data, i);
        let down = t.scalar(v);
        space.store_mut().get_mut(id).data_mut()[k] = x0;
        worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP), 1e-6));
    }
    worst
}

/// Samples where executing with ground-truth judgments disagrees with the
/// brute-force interpreter.
pub fn oracle_mismatches(u: &Universe, data: &Dataset) -> usize {
    data.samples
        .iter()
        .filter(|s| {
            let scene = data.scene(s.scene_id).unwrap();
            let mut tape = Tape::new();
            let mut judge = OracleJudge::new(scene, &u.schema);
            let out = exec(&mut tape, &mut judge, scene, &s.program, Phase::Eval, false).unwrap();
            let got = vsa::executor::predict(&tape, &out);
            got != brute_force_answer(scene, &s.program, &u.schema).unwrap() || got != s.answer
        })
        .count()
}
