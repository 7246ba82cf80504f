//! Named learnable parameters with persistent gradient buffers.
//!
//! A [`ParamStore`] outlives any single tape: each training step leases
//! parameters onto a fresh tape, runs backward, and accumulates the resulting
//! gradients back here before the optimizer consumes them.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to one parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique; registration order is the
    /// optimizer's iteration order, so keep it deterministic.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        let grad = vec![0.0; value.len()];
        self.entries.push(Entry { name: name.clone(), value, grad });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = &mut self.entries[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Per-parameter L2 norms, for loss-divergence diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|e| {
                let n = e.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                (e.name.clone(), n)
            })
            .collect()
    }

    pub fn validate_finite(&self) -> Result<()> {
        for e in &self.entries {
            if !e.value.all_finite() {
                return Err(Error::BadGradient(e.name.clone()));
            }
        }
        Ok(())
    }
}

/// Uniform Glorot initialization for a dense weight of the given shape, with
/// `fan_in`/`fan_out` taken from the trailing two dimensions.
pub fn glorot(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        0 => (1, 1),
        1 => (shape[0], shape[0]),
        n => (shape[n - 2], shape[n - 1]),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..crate::tensor::numel(shape))
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

/// Small-scale normal initialization (embedding tables).
pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    // Box-Muller keeps us off rand_distr for one call site.
    let n = crate::tensor::numel(shape);
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("normal shape")
}
