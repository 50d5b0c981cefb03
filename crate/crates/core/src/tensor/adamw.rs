//! AdamW with decoupled weight decay, plus the two learning-rate schedules
//! used by the training phases.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<S> {
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Optimizer state: per-parameter moments and a step counter that
/// increases by exactly one per `step` call.
#[derive(Debug)]
pub struct AdamW<S> {
    cfg: AdamWConfig,
    moments: HashMap<ParamId, Moments<S>>,
    step_count: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            moments: HashMap::new(),
            step_count: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One decoupled-weight-decay update over every trainable parameter.
    /// `lr_scale` multiplies the base learning rate (schedule hook).
    /// Frozen parameters are untouched; a trainable parameter without a
    /// gradient is a contract error.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr_scale: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let lr = S::from_f64(self.cfg.learning_rate * lr_scale);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.epsilon);
        let decay = S::from_f64(self.cfg.weight_decay);
        let bias1 = S::from_f64(1.0 - self.cfg.beta1.powi(t as i32));
        let bias2 = S::from_f64(1.0 - self.cfg.beta2.powi(t as i32));

        let ids = store.trainable_ids();
        for id in ids {
            let param = store.get(id);
            let grad = param
                .grad
                .as_ref()
                .ok_or_else(|| {
                    Error::contract(format!(
                        "trainable parameter {} has no gradient",
                        param.name
                    ))
                })?
                .clone();
            let (rows, cols) = param.value.shape();
            let slot = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(rows, cols),
                v: Tensor::zeros(rows, cols),
            });

            let param = store.get_mut(id);
            let p = param.value.data_mut();
            let g = grad.data();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                // decoupled decay, then the adaptive update
                p[i] = p[i] - lr * decay * p[i];
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.moments.clear();
        self.step_count = 0;
    }
}

/// Learning-rate multiplier schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warmup, then flat.
    ConstantWithWarmup { warmup_steps: u64 },
    /// Linear warmup, then cosine decay to zero at `total_steps`.
    Cosine { warmup_steps: u64, total_steps: u64 },
}

impl Schedule {
    /// Multiplier for the step about to be taken (0-based).
    pub fn scale(&self, step: u64) -> f64 {
        match *self {
            Schedule::ConstantWithWarmup { warmup_steps } => warmup(step, warmup_steps),
            Schedule::Cosine {
                warmup_steps,
                total_steps,
            } => {
                let w = warmup(step, warmup_steps);
                if step < warmup_steps || total_steps <= warmup_steps {
                    return w;
                }
                let progress = (step - warmup_steps) as f64
                    / (total_steps - warmup_steps).max(1) as f64;
                let progress = progress.min(1.0);
                w * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

fn warmup(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}
