use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ModelParams, ParamGrads};

/// AdamW with decoupled weight decay and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: Option<f64>,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the gradient norm before clipping.
    /// Parameters without a gradient still decay.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) -> Result<f64> {
        let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let data = p.data_mut();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; data.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; data.len()]);
            let g = grads.get(name);
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |g| g[i] * scale);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] -= self.lr * (update + self.weight_decay * data[i]);
            }
        }
        Ok(norm)
    }
}
