use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Constant learning rate until `decay_start`, then exponential decay that
/// reaches `base_lr · 0.001` at `total_epochs`. Epochs are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_start: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        lr_schedule(self.base_lr, self.decay_start, self.total_epochs, epoch)
    }
}

pub fn lr_schedule(base_lr: f64, decay_start: usize, total_epochs: usize, epoch: usize) -> f64 {
    if epoch < decay_start || total_epochs <= decay_start {
        return base_lr;
    }
    let frac = (epoch - decay_start) as f64 / (total_epochs - decay_start) as f64;
    base_lr * 0.001f64.powf(frac)
}

/// First and second moments for every named parameter, kept in the same
/// order as the parameter table they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<(String, Tensor)>,
    pub second: Vec<(String, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[(String, Tensor)]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One bias-corrected Adam update. `grads` must list the same names in
    /// the same order as `params`.
    pub fn step(&mut self, params: &mut [(String, Tensor)], grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((name, p), (gname, g)) in params.iter().zip(grads) {
            if name != gname || p.shape() != g.shape() {
                return Err(Error::Shape(format!("adam: gradient {gname} does not match {name}")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[k].1.data();
            let m = self.first[k].1.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.second[k].1.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let m = self.first[k].1.data();
            let v = self.second[k].1.data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
