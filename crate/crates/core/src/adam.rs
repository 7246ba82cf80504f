//! ADAM optimizer over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

/// Holds first/second moment estimates, laid out to match the store's
/// registration order. A `Adam` instance is bound to one store shape; using
/// it with a store of a different parameter count is an error.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Adam {
        let m = store.ids().map(|id| vec![0.0; store.grad(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.grad(id).len()]).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently in the store, then
    /// leaves the gradients untouched (the caller decides when to zero).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::contract("optimizer bound to a different parameter set"));
        }
        for &id in &ids {
            if !store.grad(id).iter().all(|g| g.is_finite()) {
                return Err(Error::BadGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (slot, &id) in ids.iter().enumerate() {
            let grad = store.grad(id).to_vec();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let value = store.value_mut(id).data_mut();
            for e in 0..grad.len() {
                let g = grad[e];
                m[e] = self.cfg.beta1 * m[e] + (1.0 - self.cfg.beta1) * g;
                v[e] = self.cfg.beta2 * v[e] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                value[e] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
