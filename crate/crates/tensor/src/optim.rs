//! AdamW (decoupled weight decay).

use std::sync::Arc;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments, one pair per parameter in store order.
    pub moments: Vec<(Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .collect();
        Self { config, step: 0, moments }
    }

    /// One update with learning rate `lr`. Parameters absent from `grads` are left as they are.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Arc<Tensor>)], lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.param(*id).trainable {
                continue;
            }
            let (m, v) = &mut self.moments[id.0];
            let p = store.value_mut(*id);
            if p.shape() != g.shape() {
                return Err(crate::TensorError::Dimension {
                    op: "AdamW::update",
                    detail: format!("grad {:?} for param {:?}", g.shape(), p.shape()),
                });
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pv);
            }
        }
        Ok(())
    }
}
