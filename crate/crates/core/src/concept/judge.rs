use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{ConceptError, ConceptSpace, DebiasSpace, JudgmentParams};
use crate::executor::{ExecError, Judge};
use crate::scene::{AttrId, ConceptId, Scene};
use crate::tensor::{ParamId, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    /// Prior-weighted sum over all subspaces.
    Mixture,
    /// Softmax over the vocabulary of the assigned subspace.
    Super,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JudgeMode {
    pub judgment: Judgment,
    /// Scale judgments by the distance to the concept's quasi-center.
    pub clustered: bool,
    /// Subtract shortcut-head estimates. Inference only.
    pub debiased: bool,
}

impl JudgeMode {
    pub const MIXTURE: Self = Self { judgment: Judgment::Mixture, clustered: false, debiased: false };
    pub const SUPER: Self = Self { judgment: Judgment::Super, clustered: false, debiased: false };
    pub const CLUSTERED: Self = Self { judgment: Judgment::Super, clustered: true, debiased: false };
    pub const CLUSTERED_DEBIASED: Self = Self { judgment: Judgment::Super, clustered: true, debiased: true };

    pub fn with_debias(self, on: bool) -> Self {
        Self { debiased: on, ..self }
    }

    pub fn label(&self) -> String {
        match self.judgment {
            Judgment::Mixture => "mixture".into(),
            Judgment::Super => {
                let mut s = String::from("super");
                if self.clustered {
                    s.push_str("+cc");
                }
                if self.debiased {
                    s.push_str("+sl");
                }
                s
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Prior-weighted judgment given per-subspace cosine similarities.
pub fn mixture_prob(prior: &[f64], cos: &[f64], p: &JudgmentParams) -> f64 {
    prior.iter().zip(cos).map(|(b, c)| b * sigmoid((c - p.gamma) / p.tau)).sum()
}

/// Exclusive judgment over one vocabulary given its cosine similarities.
pub fn super_distribution_from_cos(cos: &[f64], p: &JudgmentParams) -> Vec<f64> {
    let logits: Vec<f64> = cos.iter().map(|c| (c - p.gamma) / p.tau).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `log p - alpha * distance` once the center has enough samples.
pub fn clustered_log_prob(p_super: f64, distance: f64, count: u64, p: &JudgmentParams) -> f64 {
    if count >= p.cache_min {
        p_super.ln() - p.alpha * distance
    } else {
        p_super.ln()
    }
}

/// Centered subtraction of shortcut estimates from a base distribution.
/// Returns `None` when every entry is clamped away.
pub fn debias_rule(base: &[f64], shortcuts: &[Vec<f64>], lambda: f64, space: DebiasSpace) -> Option<Vec<f64>> {
    let v = base.len();
    if shortcuts.is_empty() || lambda == 0.0 {
        return Some(base.to_vec());
    }
    let u = 1.0 / v as f64;
    let h = shortcuts.len() as f64;
    match space {
        DebiasSpace::Probability => {
            let q: Vec<f64> = (0..v)
                .map(|y| {
                    let shift = shortcuts.iter().map(|s| s[y] - u).sum::<f64>() / h;
                    (base[y] - lambda * shift).max(0.0)
                })
                .collect();
            let s: f64 = q.iter().sum();
            (s > 0.0).then(|| q.into_iter().map(|x| x / s).collect())
        }
        DebiasSpace::Logit => {
            let floor = |x: f64| x.max(1e-12).ln();
            let logits: Vec<f64> = (0..v)
                .map(|y| {
                    let shift = shortcuts.iter().map(|s| floor(s[y]) - u.ln()).sum::<f64>() / h;
                    floor(base[y]) - lambda * shift
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            Some(e.into_iter().map(|x| x / s).collect())
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

struct SceneMemo {
    features: Var,
    mapped: Vec<Option<Var>>,
    normed: Vec<Option<Var>>,
    mixture: Option<Var>,
    mixture_sig: Vec<Option<Var>>,
    base: Vec<Option<Var>>,
    dists: Vec<Option<Var>>,
    membership: BTreeMap<ConceptId, Var>,
}

/// Learner judgments for one or more scenes recorded on a shared tape.
///
/// Parameters are placed on the tape once per judge. With
/// `constant_params` they enter as constants and receive no gradient.
pub struct LearnerJudge<'a> {
    space: &'a ConceptSpace,
    mode: JudgeMode,
    constant_params: bool,
    params: BTreeMap<ParamId, Var>,
    prior_probs: Option<Var>,
    emb_all: Vec<Option<Var>>,
    emb_vocab: Vec<Option<(Var, Vec<ConceptId>)>>,
    head_tables: BTreeMap<usize, Vec<Vec<f64>>>,
    scenes: Vec<SceneMemo>,
    current: usize,
    debias_fallbacks: usize,
}

impl<'a> LearnerJudge<'a> {
    pub fn new(space: &'a ConceptSpace, mode: JudgeMode, constant_params: bool) -> Result<Self, ConceptError> {
        let frozen = space.is_frozen();
        match mode.judgment {
            Judgment::Mixture if frozen => return Err(ConceptError::Checkpoint("mixture judgment needs an unfrozen hierarchy".into())),
            Judgment::Super if !frozen => return Err(ConceptError::NotFrozen),
            _ => {}
        }
        if mode.judgment == Judgment::Mixture && (mode.clustered || mode.debiased) {
            return Err(ConceptError::Checkpoint("clustering and debiasing apply to exclusive judgments only".into()));
        }
        let k = space.schema().n_attributes();
        Ok(Self {
            space,
            mode,
            constant_params,
            params: BTreeMap::new(),
            prior_probs: None,
            emb_all: vec![None; k],
            emb_vocab: vec![None; k],
            head_tables: BTreeMap::new(),
            scenes: Vec::new(),
            current: 0,
            debias_fallbacks: 0,
        })
    }

    pub fn mode(&self) -> JudgeMode {
        self.mode
    }

    pub fn space(&self) -> &'a ConceptSpace {
        self.space
    }

    /// Rows whose debiased estimate vanished and fell back to the base.
    pub fn debias_fallbacks(&self) -> usize {
        self.debias_fallbacks
    }

    /// Registers a feature matrix and makes it current. Returns its index.
    pub fn bind_features(&mut self, tape: &mut Tape, features: &[&[f64]]) -> Result<usize, ConceptError> {
        let d = self.space.feature_dim();
        let mut data = Vec::with_capacity(features.len() * d);
        for f in features {
            if f.len() != d {
                return Err(ConceptError::Checkpoint(format!("feature length {} but the learner expects {d}", f.len())));
            }
            data.extend_from_slice(f);
        }
        let features = tape.constant(Tensor::matrix(features.len(), d, data)?);
        let k = self.space.schema().n_attributes();
        self.scenes.push(SceneMemo {
            features,
            mapped: vec![None; k],
            normed: vec![None; k],
            mixture: None,
            mixture_sig: vec![None; k],
            base: vec![None; k],
            dists: vec![None; k],
            membership: BTreeMap::new(),
        });
        self.current = self.scenes.len() - 1;
        Ok(self.current)
    }

    pub fn bind_scene(&mut self, tape: &mut Tape, scene: &Scene) -> Result<usize, ConceptError> {
        let rows: Vec<&[f64]> = scene.objects.iter().map(|o| o.feature.as_slice()).collect();
        self.bind_features(tape, &rows)
    }

    pub fn select(&mut self, idx: usize) {
        assert!(idx < self.scenes.len(), "scene index out of range");
        self.current = idx;
    }

    pub fn current(&self) -> usize {
        self.current
    }

    fn param(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = self.space.store().get(id);
        let v = if self.constant_params { tape.constant(t.clone()) } else { tape.param(id, t) };
        self.params.insert(id, v);
        v
    }

    /// Raw mapped features `f_k(v)` of the current scene (n×d).
    pub fn mapped(&mut self, tape: &mut Tape, k: AttrId) -> Result<Var, ConceptError> {
        if let Some(v) = self.scenes[self.current].mapped[k.0] {
            return Ok(v);
        }
        let (wid, bid) = self.space.mapping_ids(k);
        let (w, b) = (self.param(tape, wid), self.param(tape, bid));
        let f = self.scenes[self.current].features;
        let m = tape.matmul_nt(f, w)?;
        let m = tape.add_row(m, b)?;
        self.scenes[self.current].mapped[k.0] = Some(m);
        Ok(m)
    }

    fn normed(&mut self, tape: &mut Tape, k: AttrId) -> Result<Var, ConceptError> {
        if let Some(v) = self.scenes[self.current].normed[k.0] {
            return Ok(v);
        }
        let m = self.mapped(tape, k)?;
        let n = tape.normalize_rows(m)?;
        self.scenes[self.current].normed[k.0] = Some(n);
        Ok(n)
    }

    fn logits(&mut self, tape: &mut Tape, k: AttrId, emb: Var) -> Result<Var, ConceptError> {
        let p = *self.space.judgment();
        let x = self.normed(tape, k)?;
        let cos = tape.matmul_nt(x, emb)?;
        let shifted = tape.add_scalar(cos, -p.gamma)?;
        Ok(tape.scale(shifted, 1.0 / p.tau)?)
    }

    fn emb_all(&mut self, tape: &mut Tape, k: AttrId) -> Result<Var, ConceptError> {
        if let Some(v) = self.emb_all[k.0] {
            return Ok(v);
        }
        let e = self.param(tape, self.space.embedding_id(k));
        let n = tape.normalize_rows(e)?;
        self.emb_all[k.0] = Some(n);
        Ok(n)
    }

    fn emb_vocab(&mut self, tape: &mut Tape, k: AttrId) -> Result<(Var, Vec<ConceptId>), ConceptError> {
        if let Some(v) = &self.emb_vocab[k.0] {
            return Ok(v.clone());
        }
        let vocab = self.space.vocab_of(k)?;
        let idx: Vec<usize> = vocab.iter().map(|c| c.0).collect();
        let e = self.param(tape, self.space.embedding_id(k));
        let rows = tape.rows(e, &idx)?;
        let n = tape.normalize_rows(rows)?;
        self.emb_vocab[k.0] = Some((n, vocab.clone()));
        Ok((n, vocab))
    }

    fn prior_column(&mut self, tape: &mut Tape, k: AttrId) -> Result<Var, ConceptError> {
        let probs = match self.prior_probs {
            Some(p) => p,
            None => {
                let raw = self.param(tape, self.space.prior_id());
                let p = tape.softmax(raw)?;
                self.prior_probs = Some(p);
                p
            }
        };
        Ok(tape.select_column(probs, k.0)?)
    }

    fn mixture_sig(&mut self, tape: &mut Tape, k: AttrId) -> Result<Var, ConceptError> {
        if let Some(v) = self.scenes[self.current].mixture_sig[k.0] {
            return Ok(v);
        }
        let e = self.emb_all(tape, k)?;
        let l = self.logits(tape, k, e)?;
        let s = tape.sigmoid(l)?;
        self.scenes[self.current].mixture_sig[k.0] = Some(s);
        Ok(s)
    }

    fn mixture_membership(&mut self, tape: &mut Tape) -> Result<Var, ConceptError> {
        if let Some(v) = self.scenes[self.current].mixture {
            return Ok(v);
        }
        let mut total: Option<Var> = None;
        for k in self.space.schema().attributes() {
            let s = self.mixture_sig(tape, k)?;
            let b = self.prior_column(tape, k)?;
            let term = tape.mul_row(s, b)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        let m = total.expect("at least one subspace");
        self.scenes[self.current].mixture = Some(m);
        Ok(m)
    }

    /// Exclusive judgment before clustering or debiasing (n×V).
    pub fn base_distribution(&mut self, tape: &mut Tape, k: AttrId) -> Result<(Var, Vec<ConceptId>), ConceptError> {
        let (emb, vocab) = self.emb_vocab(tape, k)?;
        if let Some(v) = self.scenes[self.current].base[k.0] {
            return Ok((v, vocab));
        }
        let l = self.logits(tape, k, emb)?;
        let d = tape.softmax(l)?;
        self.scenes[self.current].base[k.0] = Some(d);
        Ok((d, vocab))
    }

    fn head_table(&mut self, h: usize) -> Result<Vec<Vec<f64>>, ConceptError> {
        if let Some(t) = self.head_tables.get(&h) {
            return Ok(t.clone());
        }
        let t = self.space.shortcut_table(h)?.probs;
        self.head_tables.insert(h, t.clone());
        Ok(t)
    }

    fn debias(&mut self, tape: &mut Tape, k: AttrId, base: Var, v: usize) -> Result<Var, ConceptError> {
        let heads: Vec<usize> = (0..self.space.heads().len()).filter(|&h| self.space.heads()[h].dst == k).collect();
        if heads.is_empty() {
            return Ok(base);
        }
        let mut tables = Vec::new();
        let mut picks = Vec::new();
        for &h in &heads {
            tables.push(self.head_table(h)?);
            let (src_dist, _) = self.base_distribution(tape, self.space.heads()[h].src)?;
            let t = tape.value(src_dist);
            picks.push((0..t.rows()).map(|i| argmax(t.row(i))).collect::<Vec<_>>());
        }
        let p = self.space.judgment();
        let space = self.space.config().debias_space;
        let b = tape.value(base).clone();
        let mut out = Vec::with_capacity(b.len());
        for i in 0..b.rows() {
            let shortcuts: Vec<Vec<f64>> = tables.iter().zip(&picks).map(|(t, x)| t[x[i]].clone()).collect();
            match debias_rule(b.row(i), &shortcuts, p.lambda, space) {
                Some(q) => out.extend(q),
                None => {
                    if self.debias_fallbacks == 0 {
                        warn!("debiased estimate vanished for a {} row; using the base judgment", self.space.schema().attr_name(k));
                    }
                    self.debias_fallbacks += 1;
                    out.extend_from_slice(b.row(i));
                }
            }
        }
        Ok(tape.constant(Tensor::matrix(b.rows(), v, out)?))
    }

    fn cluster(&mut self, tape: &mut Tape, k: AttrId, dist: Var, vocab: &[ConceptId]) -> Result<Var, ConceptError> {
        let p = *self.space.judgment();
        let cache = &self.space.cache;
        let active: Vec<bool> = vocab.iter().map(|&c| cache.is_active(c, p.cache_min)).collect();
        if p.alpha == 0.0 || !active.iter().any(|&a| a) {
            return Ok(dist);
        }
        let d = cache.dim();
        let mut centers = Vec::with_capacity(vocab.len() * d);
        for (&c, &on) in vocab.iter().zip(&active) {
            if on {
                centers.extend_from_slice(cache.center(c));
            } else {
                centers.extend(std::iter::repeat_n(0.0, d));
            }
        }
        let n = tape.value(dist).rows();
        let mask: Vec<f64> = (0..n).flat_map(|_| active.iter().map(|&a| if a { 1.0 } else { 0.0 })).collect();
        let u = tape.constant(Tensor::matrix(vocab.len(), d, centers)?);
        let m = self.mapped(tape, k)?;
        let dd = tape.cdist(m, u)?;
        let mask = tape.constant(Tensor::matrix(n, vocab.len(), mask)?);
        let dd = tape.mul(dd, mask)?;
        let e = tape.scale(dd, -p.alpha)?;
        let factor = tape.exp(e)?;
        Ok(tape.mul(dist, factor)?)
    }

    /// Judgment for subspace `k` under the configured mode (n×V).
    pub fn distribution(&mut self, tape: &mut Tape, k: AttrId) -> Result<(Var, Vec<ConceptId>), ConceptError> {
        let (base, vocab) = self.base_distribution(tape, k)?;
        if let Some(v) = self.scenes[self.current].dists[k.0] {
            return Ok((v, vocab));
        }
        let mut d = base;
        if self.mode.debiased {
            d = self.debias(tape, k, d, vocab.len())?;
        }
        if self.mode.clustered {
            d = self.cluster(tape, k, d, &vocab)?;
        }
        self.scenes[self.current].dists[k.0] = Some(d);
        Ok((d, vocab))
    }

    fn membership_impl(&mut self, tape: &mut Tape, c: ConceptId) -> Result<Var, ConceptError> {
        if let Some(&v) = self.scenes[self.current].membership.get(&c) {
            return Ok(v);
        }
        let v = match self.mode.judgment {
            Judgment::Mixture => {
                let m = self.mixture_membership(tape)?;
                tape.select_column(m, c.0)?
            }
            Judgment::Super => {
                let (k, _) = self.space.hierarchy(c);
                let (d, vocab) = self.distribution(tape, k)?;
                let j = vocab.iter().position(|&x| x == c).expect("assigned concept is in its vocabulary");
                tape.select_column(d, j)?
            }
        };
        self.scenes[self.current].membership.insert(c, v);
        Ok(v)
    }

    fn attribute_impl(&mut self, tape: &mut Tape, a: AttrId) -> Result<(Var, Vec<ConceptId>), ConceptError> {
        match self.mode.judgment {
            Judgment::Mixture => {
                let s = self.mixture_sig(tape, a)?;
                let b = self.prior_column(tape, a)?;
                let scored = tape.mul_row(s, b)?;
                let d = tape.sum_normalize(scored)?;
                Ok((d, self.space.schema().concepts().collect()))
            }
            Judgment::Super => self.distribution(tape, a),
        }
    }
}

impl Judge for LearnerJudge<'_> {
    fn membership(&mut self, tape: &mut Tape, c: ConceptId) -> Result<Var, ExecError> {
        Ok(self.membership_impl(tape, c)?)
    }

    fn attribute_distribution(&mut self, tape: &mut Tape, a: AttrId) -> Result<(Var, Vec<ConceptId>), ExecError> {
        Ok(self.attribute_impl(tape, a)?)
    }
}

/// Single-feature judgments without an executor.
impl ConceptSpace {
    fn single<T>(
        &self,
        mode: JudgeMode,
        feature: &[f64],
        f: impl FnOnce(&mut LearnerJudge, &mut Tape) -> Result<T, ConceptError>,
    ) -> Result<T, ConceptError> {
        let mut tape = Tape::new();
        let mut j = LearnerJudge::new(self, mode, true)?;
        j.bind_features(&mut tape, &[feature])?;
        f(&mut j, &mut tape)
    }

    pub fn judge_mixture(&self, feature: &[f64], c: ConceptId) -> Result<f64, ConceptError> {
        self.single(JudgeMode::MIXTURE, feature, |j, t| {
            let v = j.membership_impl(t, c)?;
            Ok(t.value(v).data()[0])
        })
    }

    pub fn super_distribution(&self, feature: &[f64], a: AttrId) -> Result<(Vec<f64>, Vec<ConceptId>), ConceptError> {
        self.single(JudgeMode::SUPER, feature, |j, t| {
            let (d, vocab) = j.distribution(t, a)?;
            Ok((t.value(d).data().to_vec(), vocab))
        })
    }

    pub fn judge_super(&self, feature: &[f64], c: ConceptId) -> Result<f64, ConceptError> {
        let (k, _) = self.hierarchy(c);
        let (d, vocab) = self.super_distribution(feature, k)?;
        Ok(d[vocab.iter().position(|&x| x == c).expect("assigned")])
    }

    /// Log of the clustered judgment.
    pub fn judge_clustered(&self, feature: &[f64], c: ConceptId) -> Result<f64, ConceptError> {
        let (k, _) = self.hierarchy(c);
        self.single(JudgeMode::CLUSTERED, feature, |j, t| {
            let (d, vocab) = j.distribution(t, k)?;
            Ok(t.value(d).data()[vocab.iter().position(|&x| x == c).expect("assigned")].ln())
        })
    }

    pub fn debiased_distribution(&self, feature: &[f64], a: AttrId) -> Result<(Vec<f64>, Vec<ConceptId>), ConceptError> {
        self.single(JudgeMode::SUPER.with_debias(true), feature, |j, t| {
            let (d, vocab) = j.distribution(t, a)?;
            Ok((t.value(d).data().to_vec(), vocab))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::LearnerConfig;
    use crate::scene::AttributeSchema;

    const P: JudgmentParams = JudgmentParams { gamma: 0.85, tau: 0.25, alpha: 0.01, cache_min: 50, lambda: 1.0 };

    #[test]
    fn mixture_examples() {
        // degenerate prior reduces to one sigmoid term
        let one = mixture_prob(&[1.0, 0.0, 0.0, 0.0], &[0.3, 0.9, 0.1, 0.5], &P);
        assert_eq!(one, sigmoid((0.3 - 0.85) / 0.25));
        assert_eq!(mixture_prob(&[0.25; 4], &[0.85; 4], &P), 0.5);
        let v = mixture_prob(&[0.25; 4], &[1.0, 0.85, 0.85, 0.85], &P);
        let want = 0.25 / (1.0 + (-0.6f64).exp()) + 0.75 * 0.5;
        assert!((v - want).abs() < 1e-15);
    }

    #[test]
    fn super_examples() {
        assert_eq!(super_distribution_from_cos(&[0.4], &P), vec![1.0]);
        let u = super_distribution_from_cos(&[0.3; 8], &P);
        assert!(u.iter().all(|&x| (x - 0.125).abs() < 1e-15));
        let d = super_distribution_from_cos(&[1.0, 0.85, 0.85], &P);
        let e = 0.6f64.exp();
        let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((d[0] - 0.4768).abs() < 1e-4 && (d[1] - 0.2616).abs() < 1e-4);
    }

    #[test]
    fn clustered_examples() {
        let q = JudgmentParams { alpha: 0.0, ..P };
        assert_eq!(clustered_log_prob(0.5, 3.0, 100, &q), 0.5f64.ln());
        assert_eq!(clustered_log_prob(0.5, 3.0, 49, &P), 0.5f64.ln());
        assert!((clustered_log_prob(0.5, 2.0, 50, &P) - (0.5f64.ln() - 0.02)).abs() < 1e-15);
    }

    #[test]
    fn debias_examples() {
        let base = [0.2, 0.7, 0.1];
        let flat = vec![vec![1.0 / 3.0; 3]];
        let same = debias_rule(&base, &flat, 1.0, DebiasSpace::Probability).unwrap();
        for (a, b) in same.iter().zip(base) {
            assert!((a - b).abs() < 1e-15);
        }
        let skew = vec![vec![2.0 / 3.0, 1.0 / 3.0, 0.0]];
        assert_eq!(debias_rule(&base, &skew, 0.0, DebiasSpace::Probability).unwrap(), base.to_vec());
        let q = debias_rule(&base, &skew, 1.0, DebiasSpace::Probability).unwrap();
        let s = 0.7 + 0.1 + 1.0 / 3.0;
        let want = [0.0, 0.7 / s, (0.1 + 1.0 / 3.0) / s];
        for (a, b) in q.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((q[1] - 0.617).abs() < 1e-3 && (q[2] - 0.383).abs() < 1e-3);
        // the centered shift sums to zero, so some entry always survives the clamp
        let q = debias_rule(&[1.0, 0.0], &[vec![1.0, 0.0]], 4.0, DebiasSpace::Probability).unwrap();
        assert_eq!(q, vec![0.0, 1.0]);
        let l = debias_rule(&base, &flat, 1.0, DebiasSpace::Logit).unwrap();
        assert!(l.iter().zip(base).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn frozen_space() -> ConceptSpace {
        let schema = AttributeSchema::clevr();
        let mut s = ConceptSpace::new(schema.clone(), LearnerConfig::default(), 12, 3).unwrap();
        let id = s.prior_id();
        for c in schema.concepts() {
            s.store_mut().get_mut(id).row_mut(c.0)[schema.attr_of(c).0] = 6.0;
        }
        s.freeze_hierarchy().unwrap();
        s
    }

    #[test]
    fn tape_judgments_match_formulas() {
        let s = frozen_space();
        let f: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let p = *s.judgment();
        for a in s.schema().attributes() {
            let x = s.map_feature(&f, a);
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let e = s.store().get(s.embedding_id(a));
            let vocab = s.vocab_of(a).unwrap();
            let cos: Vec<f64> = vocab
                .iter()
                .map(|c| {
                    let r = e.row(c.0);
                    let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / (nr * nx)
                })
                .collect();
            let want = super_distribution_from_cos(&cos, &p);
            let (got, _) = s.super_distribution(&f, a).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_preconditions() {
        let s = ConceptSpace::new(AttributeSchema::clevr(), LearnerConfig::default(), 12, 3).unwrap();
        assert!(matches!(LearnerJudge::new(&s, JudgeMode::SUPER, true), Err(ConceptError::NotFrozen)));
        let f = frozen_space();
        assert!(LearnerJudge::new(&f, JudgeMode::MIXTURE, true).is_err());
        assert!(s.judge_super(&[0.0; 12], ConceptId(0)).is_err());
    }

    #[test]
    fn clustering_with_empty_cache_is_identity() {
        let s = frozen_space();
        let f: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let c = s.schema().lookup_concept("metal").unwrap();
        assert_eq!(s.judge_clustered(&f, c).unwrap(), s.judge_super(&f, c).unwrap().ln());
    }

    #[test]
    fn clustering_penalizes_distance() {
        let mut s = frozen_space();
        let f: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let c = s.schema().lookup_concept("metal").unwrap();
        let x = s.map_feature(&f, crate::scene::MATERIAL);
        let far: Vec<f64> = x.iter().map(|v| v + 0.25).collect();
        for _ in 0..50 {
            s.cache.insert(c, &far);
        }
        let dist = x.iter().zip(&far).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let want = clustered_log_prob(s.judge_super(&f, c).unwrap(), dist, 50, s.judgment());
        assert!((s.judge_clustered(&f, c).unwrap() - want).abs() < 1e-12);
    }
}
