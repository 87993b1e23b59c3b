use crate::error::{shape_err, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, weight_decay: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        self.step_masked(params, grads, None)
    }

    /// Like [`AdamW::step`], but parameters with `mask[i] == false` are left
    /// untouched (no decay, no moment update).
    pub fn step_masked(&mut self, params: &mut ParamStore, grads: &[Tensor], mask: Option<&[bool]>) -> Result<()> {
        if grads.len() != params.len() {
            return shape_err(format!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return shape_err(format!("gradient for {}: {:?}", params.name(id), g.shape()));
            }
        }
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if mask.is_some_and(|m| !m[k]) {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = params.get_mut(id).data_mut();
            for (i, &gi) in grads[k].data().iter().enumerate() {
                let g = gi as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let x = p[i] as f64;
                p[i] = (x - c.lr * c.weight_decay * x - c.lr * upd) as f32;
            }
        }
        Ok(())
    }
}
