//! One-cycle learning-rate schedule and Adam with decoupled weight decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Element;

/// Cosine warm-up from `max_lr/div_factor` to `max_lr` over the first
/// `pct_start` of the steps, then cosine annealing to `max_lr/final_div`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub total_steps: usize,
    pub max_lr: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub pct_start: f64,
}

impl OneCycle {
    pub fn new(total_steps: usize, max_lr: f64) -> Self {
        Self {
            total_steps,
            max_lr,
            div_factor: 25.0,
            final_div: 1e4,
            pct_start: 0.3,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div
    }

    /// Step at which the peak is reached.
    pub fn peak_step(&self) -> usize {
        (self.pct_start * self.total_steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        let peak = self.peak_step();
        Ok(if step <= peak {
            let frac = if peak == 0 { 1.0 } else { step as f64 / peak as f64 };
            anneal(self.initial_lr(), self.max_lr, frac)
        } else {
            let frac = (step - peak) as f64 / (self.total_steps - peak) as f64;
            anneal(self.max_lr, self.final_lr(), frac)
        })
    }
}

/// Cosine interpolation from `from` (frac 0) to `to` (frac 1); both ends are
/// reproduced exactly.
fn anneal(from: f64, to: f64, frac: f64) -> f64 {
    let c = (1.0 + (PI * frac).cos()) / 2.0;
    from * c + to * (1.0 - c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam moments for every trainable tensor of a fixed list of parameter
/// sets, in iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update using the gradients accumulated on the parameters.
    /// Decay `w ← w − lr·wd·w` is applied before the moment update.
    pub fn step<T: Element>(&mut self, sets: &mut [&mut ParamSet<T>], lr: f64) -> Result<()> {
        let sizes: Vec<usize> = sets
            .iter()
            .flat_map(|s| s.iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.numel()))
            .collect();
        if self.moments.is_empty() {
            self.moments = sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect();
        } else if self.moments.len() != sizes.len()
            || self.moments.iter().zip(&sizes).any(|((m, _), &n)| m.len() != n)
        {
            return Err(Error::invalid(
                "optimizer state does not match the parameter layout",
            ));
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let mut slot = 0;
        for set in sets.iter_mut() {
            for (_, t) in set.iter_mut() {
                if !t.requires_grad() {
                    continue;
                }
                let grad: Vec<f64> = match t.grad() {
                    Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                    None => vec![0.0; t.numel()],
                };
                let (m, v) = &mut self.moments[slot];
                slot += 1;
                for (i, w) in t.data_mut().iter_mut().enumerate() {
                    let mut x = w.as_f64();
                    x -= lr * weight_decay * x;
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    x -= lr * mhat / (vhat.sqrt() + eps);
                    *w = T::of(x);
                }
            }
        }
        Ok(())
    }
}
