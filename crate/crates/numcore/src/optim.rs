use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::graph::Gradients;
use crate::param::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Bias-corrected adaptive-moment state for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Learning rate used by the next step; schedules overwrite it.
    pub lr: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, lr: config.lr, step: 0, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every non-frozen parameter of component `set`.
    /// Frozen parameters and their moments are left untouched.
    pub fn step(&mut self, set: &str, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        // Validate everything before mutating anything.
        for (name, p) in params.iter() {
            if p.frozen {
                continue;
            }
            let g = grads
                .get(set, name)
                .ok_or_else(|| NumError::Contract(format!("no gradient for {set}.{name}")))?;
            if g.len() != p.value.len() {
                return Err(NumError::Shape(format!("gradient shape for {set}.{name}")));
            }
            if !g.is_finite() {
                return Err(NumError::NonFinite("gradient"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = grads.get(set, name).expect("validated above").data();
            let n = g.len();
            let m = self.first.entry(name.to_owned()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_owned()).or_insert_with(|| vec![0.0; n]);
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 over `warmup` steps, then constant `base`.
pub fn warmup_lr(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}
