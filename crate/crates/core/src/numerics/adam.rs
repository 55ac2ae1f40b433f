use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    updates: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be >= 0", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for e in store.entries() {
            let z = Tensor::zeros(e.value.shape());
            m.push(z.clone());
            v.push(z);
        }
        Ok(Self {
            config,
            step: 0,
            m,
            v,
            updates: vec![0; store.len()],
        })
    }

    /// Number of updates applied to parameter `index`.
    pub fn updates_of(&self, index: usize) -> u64 {
        self.updates[index]
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter of the
    /// store; frozen parameters and `None` slots are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            let Some(g) = g else { continue };
            let entry = store.entry(id);
            g.expect_same_shape(&entry.value, "adam")?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", entry.name)));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in store.ids().zip(grads) {
            let Some(g) = g else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
            self.updates[i] += 1;
        }
        Ok(())
    }
}
