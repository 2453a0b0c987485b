use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamStore};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates. Parameters without a gradient in a step
/// are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct AdamState<S: Float> {
    pub config: AdamConfig,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Float> AdamState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<S>> = store
            .ids()
            .map(|id| vec![S::zero(); store.get(id).numel()])
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &ParamGrads<S>,
        lr: f64,
    ) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::dim("adam", &[store.len()], &[self.m.len()]));
        }
        for id in grads.touched() {
            let g = grads.get(id).expect("touched");
            let n = store.get(id).numel();
            if g.len() != n || self.m[id.index()].len() != n {
                return Err(Error::dim("adam", store.get(id).shape(), &[g.len()]));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (S::from_f64(beta1), S::from_f64(beta2));
        let (one, lr_t) = (S::one(), S::from_f64(lr / c1));
        let (inv_c2, eps) = (S::from_f64(1.0 / c2), S::from_f64(eps));
        for id in grads.touched() {
            let g = grads.get(id).expect("touched");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, &gi), mi), vi) in store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *p -= lr_t * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr0·decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}
