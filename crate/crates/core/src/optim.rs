//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` from the gradients accumulated in
    /// `store`: `θ ← θ(1 − lr·λ)` then `θ ← θ − lr·m̂ / (√v̂ + eps)`.
    /// Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((param, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = param.tensor.grad().map(<[f64]>::to_vec);
            let data = param.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] = data[i] * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 over `round(warmup_fraction · total)` steps, then
/// cosine decay towards 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub total: usize,
    pub warmup: usize,
}

impl Schedule {
    pub fn new(peak: f64, total: usize, warmup_fraction: f64) -> Self {
        let warmup = ((total as f64) * warmup_fraction).round() as usize;
        Schedule {
            peak,
            total,
            warmup: warmup.min(total),
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}
