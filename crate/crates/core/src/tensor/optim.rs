use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Always `None`; kept so resolved configs state it explicitly.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, grad_clip: None }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay over a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    params: Vec<ParamId>,
    moments: BTreeMap<ParamId, Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|&id| {
                let n = store.get(id).len();
                (id, Moments { m: vec![0.0; n], v: vec![0.0; n] })
            })
            .collect();
        Self { config, params, moments, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One update. Every managed parameter must have a gradient entry.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for id in &self.params {
            let g = grads.get(*id).ok_or_else(|| TensorError::Contract(format!("missing gradient for {}", store.name(*id))))?;
            if g.shape() != store.get(*id).shape() {
                return Err(TensorError::Shape {
                    op: "adamw",
                    detail: format!("{}: grad {:?} vs param {:?}", store.name(*id), g.shape(), store.get(*id).shape()),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in &self.params {
            let g = grads.get(*id).expect("checked above").data();
            let mom = self.moments.get_mut(id).expect("registered");
            let p: &mut Tensor = store.get_mut(*id);
            let decay = 1.0 - c.lr * c.weight_decay;
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                *x *= decay;
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g[i];
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            if !p.is_finite() {
                return Err(TensorError::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }
}
