use std::collections::BTreeMap;

use serde::Serialize;

use super::judge::argmax;
use super::{ConceptError, ConceptSpace, LearnerJudge};
use crate::executor::{ExecError, Judge};
use crate::scene::{AttrId, ConceptId};
use crate::tensor::{Tape, Tensor, Var};

/// Guard for normalizing the head output; keeps the zero-initialized head
/// defined (it then scores every target concept equally).
const HEAD_EPS: f64 = 1e-6;

/// Conditional table `P(target value | source value)` learned by one head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadTable {
    pub head: String,
    pub src: AttrId,
    pub dst: AttrId,
    pub src_vocab: Vec<ConceptId>,
    pub dst_vocab: Vec<ConceptId>,
    /// One row per source value, summing to one.
    pub probs: Vec<Vec<f64>>,
}

impl ConceptSpace {
    /// Records head `h` on the tape as a (source vocab × target vocab)
    /// row-stochastic matrix. Embeddings enter as constants, so only the
    /// head parameters can receive gradient.
    pub fn head_table_var(&self, tape: &mut Tape, h: usize) -> Result<(Var, Vec<ConceptId>, Vec<ConceptId>), ConceptError> {
        let hp = self.heads()[h];
        let src_vocab = self.vocab_of(hp.src)?;
        let dst_vocab = self.vocab_of(hp.dst)?;
        let gather = |a: AttrId, vocab: &[ConceptId]| -> Result<Tensor, ConceptError> {
            let e = self.store().get(self.embedding_id(a));
            let d = e.cols();
            let data = vocab.iter().flat_map(|c| e.row(c.0).to_vec()).collect();
            Ok(Tensor::matrix(vocab.len(), d, data)?)
        };
        let x = tape.constant(gather(hp.src, &src_vocab)?);
        let x = tape.stop_gradient(x);
        let y = tape.constant(gather(hp.dst, &dst_vocab)?);
        let y = tape.normalize_rows(y)?;
        let st = self.store();
        let (w1, b1, w2, b2) = (
            tape.param(hp.w1, st.get(hp.w1)),
            tape.param(hp.b1, st.get(hp.b1)),
            tape.param(hp.w2, st.get(hp.w2)),
            tape.param(hp.b2, st.get(hp.b2)),
        );
        let hdn = tape.matmul_nt(x, w1)?;
        let hdn = tape.add_row(hdn, b1)?;
        let hdn = tape.relu(hdn)?;
        let out = tape.matmul_nt(hdn, w2)?;
        let out = tape.add_row(out, b2)?;
        let out = tape.normalize_rows_eps(out, HEAD_EPS)?;
        let cos = tape.matmul_nt(out, y)?;
        let p = self.judgment();
        let l = tape.add_scalar(cos, -p.gamma)?;
        let l = tape.scale(l, 1.0 / p.tau)?;
        Ok((tape.softmax(l)?, src_vocab, dst_vocab))
    }

    pub fn shortcut_table(&self, h: usize) -> Result<HeadTable, ConceptError> {
        let mut tape = Tape::new();
        let (t, src_vocab, dst_vocab) = self.head_table_var(&mut tape, h)?;
        let v = tape.value(t);
        let probs = (0..v.rows()).map(|i| v.row(i).to_vec()).collect();
        let hp = self.heads()[h];
        Ok(HeadTable { head: self.head_name(h), src: hp.src, dst: hp.dst, src_vocab, dst_vocab, probs })
    }

    /// Head output for one object: the table row of its most likely source value.
    pub fn shortcut_prob(&self, feature: &[f64], h: usize) -> Result<Vec<f64>, ConceptError> {
        let (d, _) = self.super_distribution(feature, self.heads()[h].src)?;
        Ok(self.shortcut_table(h)?.probs[argmax(&d)].clone())
    }
}

/// Judge whose target-attribute judgments come from a shortcut head and
/// everything else from a base learner judge.
pub struct ShortcutJudge<'j, 'a> {
    base: &'j mut LearnerJudge<'a>,
    table: Var,
    src: AttrId,
    dst: AttrId,
    dst_vocab: Vec<ConceptId>,
    rows: BTreeMap<usize, Var>,
    hard: bool,
}

impl<'j, 'a> ShortcutJudge<'j, 'a> {
    /// `table` comes from [`ConceptSpace::head_table_var`] on the same tape.
    pub fn new(base: &'j mut LearnerJudge<'a>, h: usize, table: Var, dst_vocab: Vec<ConceptId>) -> Self {
        let hp = base.space().heads()[h];
        Self { base, table, src: hp.src, dst: hp.dst, dst_vocab, rows: BTreeMap::new(), hard: false }
    }

    /// Rounds the base judge's memberships to 0/1, so a query reads the head
    /// at the objects the base model picks rather than a soft blend of all.
    /// Only valid when the base judge holds no trainable parameters.
    pub fn with_hard_referents(mut self) -> Self {
        self.hard = true;
        self
    }

    fn rows(&mut self, tape: &mut Tape) -> Result<Var, ConceptError> {
        let cur = self.base.current();
        if let Some(&v) = self.rows.get(&cur) {
            return Ok(v);
        }
        let (d, _) = self.base.base_distribution(tape, self.src)?;
        let t = tape.value(d);
        let picks: Vec<usize> = (0..t.rows()).map(|i| argmax(t.row(i))).collect();
        let r = tape.rows(self.table, &picks)?;
        self.rows.insert(cur, r);
        Ok(r)
    }
}

impl Judge for ShortcutJudge<'_, '_> {
    fn membership(&mut self, tape: &mut Tape, c: ConceptId) -> Result<Var, ExecError> {
        match self.dst_vocab.iter().position(|&x| x == c) {
            Some(j) => {
                let r = self.rows(tape)?;
                Ok(tape.select_column(r, j)?)
            }
            None if self.hard => {
                let m = self.base.membership(tape, c)?;
                let v = tape.value(m).data().iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
                Ok(tape.constant_vector(v))
            }
            None => self.base.membership(tape, c),
        }
    }

    fn attribute_distribution(&mut self, tape: &mut Tape, a: AttrId) -> Result<(Var, Vec<ConceptId>), ExecError> {
        if a == self.dst {
            Ok((self.rows(tape)?, self.dst_vocab.clone()))
        } else {
            self.base.attribute_distribution(tape, a)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::LearnerConfig;
    use crate::scene::{AttributeSchema, COLOR, SHAPE};

    fn frozen() -> ConceptSpace {
        let schema = AttributeSchema::clevr();
        let mut s = ConceptSpace::new(schema.clone(), LearnerConfig::default(), 10, 5).unwrap();
        let id = s.prior_id();
        for c in schema.concepts() {
            s.store_mut().get_mut(id).row_mut(c.0)[schema.attr_of(c).0] = 4.0;
        }
        s.freeze_hierarchy().unwrap();
        s
    }

    #[test]
    fn untrained_head_is_uniform() {
        let s = frozen();
        for h in 0..s.heads().len() {
            let t = s.shortcut_table(h).unwrap();
            let v = t.dst_vocab.len() as f64;
            for row in &t.probs {
                assert!(row.iter().all(|&p| (p - 1.0 / v).abs() < 1e-12), "{}", t.head);
            }
        }
    }

    #[test]
    fn head_gradients_reach_only_head_params() {
        let s = frozen();
        let h = s.head_index(COLOR, SHAPE).unwrap();
        let mut tape = Tape::new();
        let (t, _, _) = s.head_table_var(&mut tape, h).unwrap();
        let e = tape.element(t, 1, 0).unwrap();
        let l = tape.log(e).unwrap();
        let g = tape.backward(l).unwrap();
        let hp = s.heads()[h];
        let ids: Vec<_> = g.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids.len(), 4);
        for id in [hp.w1, hp.b1, hp.w2, hp.b2] {
            assert!(ids.contains(&id));
        }
        assert!(g.get(hp.w2).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn debias_with_uniform_heads_is_identity() {
        let s = frozen();
        let f: Vec<f64> = (0..10).map(|i| (i as f64 * 1.3).sin()).collect();
        for a in s.schema().attributes() {
            let (base, _) = s.super_distribution(&f, a).unwrap();
            let (deb, _) = s.debiased_distribution(&f, a).unwrap();
            for (x, y) in base.iter().zip(&deb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_referents_are_binary() {
        use crate::concept::JudgeMode;
        use crate::scene::{make_universe, sample_scene, scene_rng, BiasCondition, UniverseConfig};
        let u = make_universe(0, UniverseConfig::default()).unwrap();
        let mut s = ConceptSpace::new(u.schema.clone(), LearnerConfig::default(), u.config.feature_dim, 5).unwrap();
        let id = s.prior_id();
        for c in u.schema.concepts() {
            s.store_mut().get_mut(id).row_mut(c.0)[u.schema.attr_of(c).0] = 4.0;
        }
        s.freeze_hierarchy().unwrap();
        let scene = sample_scene(&u, BiasCondition::Uniform, 8, 0, &mut scene_rng(1, 0)).unwrap();
        let h = s.head_index(COLOR, SHAPE).unwrap();
        let mut tape = Tape::new();
        let mut base = LearnerJudge::new(&s, JudgeMode::SUPER, false).unwrap();
        let k = base.bind_scene(&mut tape, &scene).unwrap();
        base.select(k);
        let (t, _, dst) = s.head_table_var(&mut tape, h).unwrap();
        let mut soft_seen = false;
        {
            let mut judge = ShortcutJudge::new(&mut base, h, t, dst.clone()).with_hard_referents();
            for c in u.schema.vocab(COLOR) {
                let m = judge.membership(&mut tape, c).unwrap();
                assert!(tape.value(m).data().iter().all(|&x| x == 0.0 || x == 1.0));
            }
        }
        for c in u.schema.vocab(COLOR) {
            let m = base.membership(&mut tape, c).unwrap();
            soft_seen |= tape.value(m).data().iter().any(|&x| x > 0.0 && x < 1.0);
        }
        assert!(soft_seen);
    }
}
