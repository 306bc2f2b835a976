//! Property tests for the invariants of the tape, sampler, learner and executor.

mod common;

use common::{random_space, RandomGraph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsa::concept::{debias_rule, ConceptSpace, DebiasSpace, JudgeMode, LearnerConfig, LearnerJudge, QuasiCenterCache};
use vsa::dataset::{build_dataset, scene_to_json, DatasetSpec};
use vsa::eval::evaluate;
use vsa::executor::{exec, Output, Phase};
use vsa::program::{brute_force_answer, Constraints, QType, QTypeMix};
use vsa::scene::{make_universe, sample_scene, scene_rng, BiasCondition, ConceptId, UniverseConfig, COLOR, SHAPE};
use vsa::tensor::{ParamId, Tape, Tensor};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

fn features(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn backward_is_bit_deterministic(seed in any::<u64>()) {
        let g = RandomGraph::new(seed);
        let grads = || {
            let mut t = Tape::new();
            let out = g.build(&mut t);
            let gr = t.backward(out).unwrap();
            g.params.iter().map(|&id| gr.get(id).map(|x| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())).collect::<Vec<_>>()
        };
        prop_assert_eq!(grads(), grads());
    }

    #[test]
    fn stop_gradient_cuts_its_path(x in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let mut t = Tape::new();
        let p = t.param(ParamId(0), &Tensor::vector(x.clone()));
        let s = t.stop_gradient(p);
        let e = t.exp(s).unwrap();
        let y = t.mul(e, p).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        let expected: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        prop_assert_eq!(g.get(ParamId(0)).unwrap().data(), &expected[..]);
    }

    #[test]
    fn scenes_are_determined_by_seed_and_index(seed in any::<u64>(), index in 0u64..1000, n in 3usize..=10) {
        let u = make_universe(3, UniverseConfig::default()).unwrap();
        let a = sample_scene(&u, BiasCondition::CogentB, n, index, &mut scene_rng(seed, index)).unwrap();
        let b = sample_scene(&u, BiasCondition::CogentB, n, index, &mut scene_rng(seed, index)).unwrap();
        prop_assert_eq!(scene_to_json(&a, &u), scene_to_json(&b, &u));
    }

    #[test]
    fn judge_super_sums_to_one(seed in any::<u64>()) {
        let u = make_universe(1, UniverseConfig::default()).unwrap();
        let space = random_space(&u.schema, u.config.feature_dim, JudgeMode::SUPER, seed);
        for f in features(seed, 5, u.config.feature_dim) {
            for a in u.schema.attributes() {
                let (d, _) = space.super_distribution(&f, a).unwrap();
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn judge_super_ignores_feature_scale(seed in any::<u64>(), s in 0.01f64..100.0) {
        let u = make_universe(1, UniverseConfig::default()).unwrap();
        let mut space = random_space(&u.schema, u.config.feature_dim, JudgeMode::SUPER, seed);
        for a in u.schema.attributes() {
            let (_, bias) = space.mapping_ids(a);
            space.store_mut().get_mut(bias).data_mut().fill(0.0);
        }
        for f in features(seed, 3, u.config.feature_dim) {
            let scaled: Vec<f64> = f.iter().map(|x| x * s).collect();
            for a in u.schema.attributes() {
                let (d0, _) = space.super_distribution(&f, a).unwrap();
                let (d1, _) = space.super_distribution(&scaled, a).unwrap();
                for (p, q) in d0.iter().zip(&d1) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn incremental_center_is_the_batch_mean(xs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..300)) {
        let mut cache = QuasiCenterCache::new(2, 4);
        let c = ConceptId(1);
        for (i, x) in xs.iter().enumerate() {
            cache.insert(c, x);
            prop_assert_eq!(cache.count(c), i as u64 + 1);
        }
        for j in 0..4 {
            let mean = xs.iter().map(|x| x[j]).sum::<f64>() / xs.len() as f64;
            prop_assert!((cache.center(c)[j] - mean).abs() < 1e-9);
        }
        prop_assert_eq!(cache.count(ConceptId(0)), 0);
    }

    #[test]
    fn debias_rule_is_a_distribution(
        base in prop::collection::vec(0.001f64..1.0, 2..9),
        lambda in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let s: f64 = base.iter().sum();
        let base: Vec<f64> = base.iter().map(|x| x / s).collect();
        let v = base.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
        let hs: f64 = head.iter().sum();
        let head: Vec<f64> = head.iter().map(|x| x / hs).collect();
        for space in [DebiasSpace::Probability, DebiasSpace::Logit] {
            if let Some(q) = debias_rule(&base, std::slice::from_ref(&head), lambda, space) {
                prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(q.iter().all(|&x| x >= 0.0));
            }
            let flat = vec![1.0 / v as f64; v];
            let same = debias_rule(&base, &[flat], lambda, space).unwrap();
            prop_assert!(same.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-12));
            prop_assert_eq!(debias_rule(&base, std::slice::from_ref(&head), 0.0, space).unwrap(), base.clone());
        }
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn generated_answers_match_the_interpreter(seed in any::<u64>()) {
        let u = make_universe(seed % 4, UniverseConfig::default()).unwrap();
        let spec = DatasetSpec { scenes: 10, questions_per_scene: 7, seed, ..Default::default() };
        let d = build_dataset(&u, &spec).unwrap();
        for s in &d.samples {
            prop_assert_eq!(brute_force_answer(d.scene(s.scene_id).unwrap(), &s.program, &u.schema).unwrap(), s.answer);
        }
    }

    #[test]
    fn lesson_one_constraints_hold(seed in any::<u64>()) {
        let u = make_universe(2, UniverseConfig::default()).unwrap();
        let spec = DatasetSpec {
            scenes: 20,
            max_objects: 5,
            mix: QTypeMix::only(QType::Query),
            constraints: Constraints { max_depth: Some(6), ..Default::default() },
            seed,
            ..Default::default()
        };
        let d = build_dataset(&u, &spec).unwrap();
        prop_assert!(!d.is_empty());
        for s in &d.samples {
            prop_assert_eq!(s.qtype, QType::Query);
            prop_assert!(s.program.depth() < 6);
            prop_assert!(d.scene(s.scene_id).unwrap().objects.len() < 6);
        }
    }

    #[test]
    fn masks_stay_in_the_unit_interval(seed in any::<u64>(), m in 0usize..3) {
        let mode = [JudgeMode::MIXTURE, JudgeMode::SUPER, JudgeMode::CLUSTERED][m];
        let u = make_universe(seed % 3, UniverseConfig::default()).unwrap();
        let d = build_dataset(&u, &DatasetSpec { scenes: 4, questions_per_scene: 7, seed, ..Default::default() }).unwrap();
        let mut space = random_space(&u.schema, u.config.feature_dim, mode, seed);
        populate_cache(&mut space, seed);
        for s in &d.samples {
            let scene = d.scene(s.scene_id).unwrap();
            let mut tape = Tape::new();
            let mut judge = LearnerJudge::new(&space, mode, true).unwrap();
            let k = judge.bind_scene(&mut tape, scene).unwrap();
            judge.select(k);
            let out = exec(&mut tape, &mut judge, scene, &s.program, Phase::Train, true).unwrap();
            for step in out.trace.iter().filter(|t| matches!(t.kind.as_str(), "scene" | "filter" | "relate")) {
                prop_assert!(step.values.iter().all(|&x| (0.0..=1.0).contains(&x)), "{} {:?}", step.kind, step.values);
            }
        }
    }

    #[test]
    fn clustered_with_zero_decay_is_super(seed in any::<u64>()) {
        let u = make_universe(0, UniverseConfig::default()).unwrap();
        let d = build_dataset(&u, &DatasetSpec { scenes: 3, questions_per_scene: 7, seed, ..Default::default() }).unwrap();
        let mut space = random_space(&u.schema, u.config.feature_dim, JudgeMode::SUPER, seed);
        populate_cache(&mut space, seed);
        let mut j = *space.judgment();
        j.alpha = 0.0;
        space.set_judgment(j);
        for s in &d.samples {
            let scene = d.scene(s.scene_id).unwrap();
            let run = |mode| {
                let mut tape = Tape::new();
                let mut judge = LearnerJudge::new(&space, mode, true).unwrap();
                let k = judge.bind_scene(&mut tape, scene).unwrap();
                judge.select(k);
                let out = exec(&mut tape, &mut judge, scene, &s.program, Phase::Train, false).unwrap();
                let v = match out.output {
                    Output::Distribution { probs, .. } => probs,
                    Output::Count(v) | Output::Probability { p: v, .. } => v,
                };
                tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(JudgeMode::SUPER), run(JudgeMode::CLUSTERED));
        }
    }

    #[test]
    fn eval_tallies_recount(seed in any::<u64>()) {
        let u = make_universe(0, UniverseConfig::default()).unwrap();
        let d = build_dataset(&u, &DatasetSpec { scenes: 5, seed, ..Default::default() }).unwrap();
        let space = random_space(&u.schema, u.config.feature_dim, JudgeMode::SUPER, seed);
        let r = evaluate(&space, JudgeMode::SUPER, &d).unwrap();
        let (overall, per) = r.recount();
        prop_assert_eq!(overall, r.overall);
        prop_assert_eq!(per, r.per_qtype.clone());
        prop_assert_eq!(r.outcomes.len(), d.len());
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in any::<u64>()) {
        let u = make_universe(0, UniverseConfig::default()).unwrap();
        let mut space = random_space(&u.schema, u.config.feature_dim, JudgeMode::SUPER, seed);
        populate_cache(&mut space, seed);
        let text = space.to_json();
        let back = ConceptSpace::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back.full_hash(), space.full_hash());
    }
}

/// Active quasi-centers for every concept.
fn populate_cache(space: &mut ConceptSpace, seed: u64) {
    let dim = space.subspace_dim();
    let n = space.judgment().cache_min as usize;
    let concepts: Vec<ConceptId> = space.schema().concepts().collect();
    for (i, c) in concepts.into_iter().enumerate() {
        for x in features(seed ^ i as u64, n, dim) {
            space.cache.insert(c, &x);
        }
    }
}

/// With a one-hot prior and a constant similarity to the other concept, the
/// mixture and exclusive judgments order objects identically.
#[test]
fn mixture_and_exclusive_orderings_agree() {
    let u = make_universe(0, UniverseConfig::default()).unwrap();
    let schema = &u.schema;
    let material = schema.lookup_attr("material").unwrap();
    let (rubber, metal) = (schema.lookup_concept("rubber").unwrap(), schema.lookup_concept("metal").unwrap());
    let fd = u.config.feature_dim;
    let mut space = ConceptSpace::new(schema.clone(), LearnerConfig::default(), fd, 0).unwrap();
    let dim = space.subspace_dim();
    let (w, b) = space.mapping_ids(material);
    let st = space.store_mut();
    st.get_mut(b).data_mut().fill(0.0);
    let wt = st.get_mut(w);
    wt.data_mut().fill(0.0);
    for r in 0..dim {
        wt.row_mut(r)[r] = 1.0;
    }
    let e = space.embedding_id(material);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let emb = space.store_mut().get_mut(e);
    emb.row_mut(rubber.0).copy_from_slice(&row);
    emb.row_mut(metal.0).fill(0.0);
    emb.row_mut(metal.0)[0] = 1.0;
    let prior = space.prior_id();
    for c in schema.concepts() {
        let p = space.store_mut().get_mut(prior).row_mut(c.0);
        p.fill(0.0);
        p[schema.attr_of(c).0] = 60.0;
    }
    let objects: Vec<Vec<f64>> = features(4, 100, fd)
        .into_iter()
        .map(|mut f| {
            f[0] = 0.0;
            f
        })
        .collect();
    let mixture: Vec<f64> = objects.iter().map(|f| space.judge_mixture(f, rubber).unwrap()).collect();
    space.freeze_hierarchy().unwrap();
    let exclusive: Vec<f64> = objects.iter().map(|f| space.judge_super(f, rubber).unwrap()).collect();
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    assert_eq!(rank(&mixture), rank(&exclusive));
}

#[test]
fn cogent_a_conditionals_are_exact() {
    let u = make_universe(6, UniverseConfig::default()).unwrap();
    let s = &u.schema;
    let mut counts = [[0usize; 3]; 8];
    let mut total = 0;
    let mut i = 0;
    while total < 80_000 {
        let scene = sample_scene(&u, BiasCondition::CogentA, 10, i, &mut scene_rng(17, i)).unwrap();
        for o in &scene.objects {
            counts[s.local_index(o.value(COLOR))][s.local_index(o.value(SHAPE))] += 1;
            total += 1;
        }
        i += 1;
    }
    for (ci, row) in counts.iter().enumerate() {
        let n: usize = row.iter().sum();
        let name = s.concept_name(s.vocab(COLOR)[ci]);
        let expected =
            if ["gray", "blue", "brown", "yellow"].contains(&name) { [2.0 / 3.0, 1.0 / 3.0, 0.0] } else { [0.0, 1.0 / 3.0, 2.0 / 3.0] };
        for k in 0..3 {
            let p = row[k] as f64 / n as f64;
            assert!((p - expected[k]).abs() < 0.02, "{name}: {p} vs {}", expected[k]);
        }
    }
}
