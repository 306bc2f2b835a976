//! Shortcut-head tables compared against the conditionals the scene sampler injects.

use serde::Serialize;

use crate::concept::{ConceptError, ConceptSpace};
use crate::scene::{AttrId, AttributeSchema, BiasCondition, COLOR, SHAPE};

/// Exact `P(dst value | src value)` under the sampler for `condition`:
/// shape uniform, color uniform over the colors allowed for that shape,
/// every other attribute uniform and independent.
pub fn injected_conditional(schema: &AttributeSchema, condition: BiasCondition, src: AttrId, dst: AttrId) -> Vec<Vec<f64>> {
    let (vs, vd) = (schema.vocab(src), schema.vocab(dst));
    let mut joint = vec![vec![0.0; vd.len()]; vs.len()];
    let shapes = schema.vocab(SHAPE);
    for &shape in &shapes {
        let allowed = condition.allowed_colors(schema, schema.concept_name(shape));
        for &color in &allowed {
            let p_sc = 1.0 / (shapes.len() as f64 * allowed.len() as f64);
            let pick = |a: AttrId| match a {
                a if a == SHAPE => Some(shape),
                a if a == COLOR => Some(color),
                _ => None,
            };
            // Attributes other than color and shape factor out uniformly.
            let src_vals: Vec<(usize, f64)> = match pick(src) {
                Some(c) => vec![(schema.local_index(c), 1.0)],
                None => (0..vs.len()).map(|i| (i, 1.0 / vs.len() as f64)).collect(),
            };
            let dst_vals: Vec<(usize, f64)> = match pick(dst) {
                Some(c) => vec![(schema.local_index(c), 1.0)],
                None => (0..vd.len()).map(|j| (j, 1.0 / vd.len() as f64)).collect(),
            };
            for &(i, pi) in &src_vals {
                for &(j, pj) in &dst_vals {
                    joint[i][j] += p_sc * pi * pj;
                }
            }
        }
    }
    joint
        .into_iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadBias {
    pub head: String,
    pub src_values: Vec<String>,
    pub dst_values: Vec<String>,
    pub learned: Vec<Vec<f64>>,
    pub injected: Vec<Vec<f64>>,
    pub max_abs_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub condition: BiasCondition,
    pub heads: Vec<HeadBias>,
}

/// Learned tables of the selected heads (all when `heads` is `None`).
pub fn bias_report(space: &ConceptSpace, condition: BiasCondition, heads: Option<&[usize]>) -> Result<BiasReport, ConceptError> {
    let schema = space.schema();
    let all: Vec<usize> = (0..space.heads().len()).collect();
    let mut out = Vec::new();
    for &h in heads.unwrap_or(&all) {
        let t = space.shortcut_table(h)?;
        let src_order: Vec<usize> = t.src_vocab.iter().map(|&c| schema.local_index(c)).collect();
        let dst_order: Vec<usize> = t.dst_vocab.iter().map(|&c| schema.local_index(c)).collect();
        let truth = injected_conditional(schema, condition, t.src, t.dst);
        let injected: Vec<Vec<f64>> = src_order.iter().map(|&i| dst_order.iter().map(|&j| truth[i][j]).collect()).collect();
        let max_abs_deviation =
            t.probs.iter().zip(&injected).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
        let name = |c: &crate::scene::ConceptId| schema.concept_name(*c).to_string();
        out.push(HeadBias {
            head: t.head,
            src_values: t.src_vocab.iter().map(name).collect(),
            dst_values: t.dst_vocab.iter().map(name).collect(),
            learned: t.probs,
            injected,
            max_abs_deviation,
        });
    }
    Ok(BiasReport { condition, heads: out })
}
