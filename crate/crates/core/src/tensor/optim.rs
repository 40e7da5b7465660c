//! Named parameter storage and the Adam optimizer.
//!
//! Parameters live outside any graph so several graphs (one per training
//! step) can bind to the same store. Gradients accumulate additively into
//! the store across backward passes until `zero_grads`.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub frozen: bool,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0f32; value.numel()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[f32]) {
        for (d, &s) in self.params[id.0].grad.iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Freeze every parameter whose name satisfies the predicate.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.frozen = true;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Global L2 norm of all non-frozen gradients.
    pub fn grad_norm(&self) -> f32 {
        let mut s = 0.0f64;
        for p in &self.params {
            if p.frozen {
                continue;
            }
            for &g in &p.grad {
                s += (g as f64) * (g as f64);
            }
        }
        (s as f32).sqrt()
    }

    /// Flattened copies of every value, in registration order (for
    /// serialization and exact-equality checks).
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.shape().to_vec(),
                    p.value.data().to_vec(),
                )
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

/// Adam with per-parameter first/second moment buffers. Frozen parameters
/// are skipped entirely: their values, moments, and step counts do not
/// change, so freezing is bit-exact.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store
            .params
            .iter()
            .map(|p| vec![0.0f32; p.value.numel()])
            .collect();
        let v = store
            .params
            .iter()
            .map(|p| vec![0.0f32; p.value.numel()])
            .collect();
        Self {
            cfg,
            m,
            v,
            t: vec![0; store.len()],
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f32 {
        self.cfg.lr
    }

    /// Per-parameter state in store registration order: step count, first
    /// moment, second moment. For checkpointing an in-flight optimizer.
    pub fn export_state(&self) -> Vec<(u64, Vec<f32>, Vec<f32>)> {
        (0..self.t.len())
            .map(|i| (self.t[i], self.m[i].clone(), self.v[i].clone()))
            .collect()
    }

    pub fn import_state(&mut self, state: Vec<(u64, Vec<f32>, Vec<f32>)>) -> Result<(), TensorError> {
        if state.len() != self.t.len() {
            return Err(TensorError::Contract(format!(
                "optimizer state has {} entries, expected {}",
                state.len(),
                self.t.len()
            )));
        }
        for (i, (t, m, v)) in state.into_iter().enumerate() {
            if m.len() != self.m[i].len() || v.len() != self.v[i].len() {
                return Err(TensorError::Contract(format!(
                    "optimizer state entry {i} has {} and {} values, expected {}",
                    m.len(),
                    v.len(),
                    self.m[i].len()
                )));
            }
            self.t[i] = t;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let bc1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
            let bc2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
            let lr_t = self.cfg.lr as f64 * bc2.sqrt() / bc1;
            let lr_t = lr_t as f32;
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let vals = p.value.data_mut();
            for j in 0..vals.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                vals[j] -= lr_t * m[j] / (v[j].sqrt() + self.cfg.eps);
            }
        }
    }
}
