use crate::nn::{GradStore, ParamId, ParamStore};

use super::TrainError;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr.is_finite()
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of completed updates.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Parameters excluded from updates (and from weight decay).
    pub frozen: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            frozen: vec![false; params.len()],
        }
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.index()] = true;
    }

    /// One update. The gradients are checked for finiteness before any
    /// parameter is touched, so a failed step leaves everything unchanged.
    pub fn update(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<(), TrainError> {
        if params.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            if g.len() != self.m[id.index()].len() {
                return Err(TrainError::Config(format!(
                    "gradient size mismatch for `{}`",
                    params.name(id)
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: params.name(id).to_string(),
                    index: i,
                    step: self.step,
                });
            }
        }
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let k = id.index();
            if self.frozen[k] {
                continue;
            }
            let g = grads.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = params.get_mut(id).data_mut();
            for j in 0..w.len() {
                w[j] *= decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
///
/// # Panics
///
/// Panics if `max_norm` is not positive.
pub fn clip_gradients(grads: &mut GradStore, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip norm must be positive");
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
