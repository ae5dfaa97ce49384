//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Default::default() }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", config.learning_rate)));
        }
        Ok(Adam { config, step_count: 0, moments: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Names of parameters holding moment buffers.
    pub fn registered(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(|s| s.as_str())
    }

    /// Registers a trainable parameter so it receives moment buffers.
    pub fn register(&mut self, name: &str, len: usize) {
        self.moments
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; len], v: vec![0.0; len] });
    }

    /// Applies one update to every `(name, tensor)` pair. Parameters seen for
    /// the first time are registered; every registered parameter must be
    /// present and carry a gradient. Gradients are left in place.
    pub fn step<'t, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'t str, &'t mut Tensor)>,
    {
        let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, t) in &params {
            if t.grad().is_none() {
                return Err(Error::State(format!("parameter '{name}' has no gradient")));
            }
            if let Some(m) = self.moments.get(*name) {
                if m.m.len() != t.len() {
                    return Err(Error::State(format!("parameter '{name}' changed size")));
                }
            }
        }
        if self.step_count > 0 {
            for name in self.moments.keys() {
                if !params.iter().any(|(n, _)| n == name) {
                    return Err(Error::State(format!("registered parameter '{name}' missing from update")));
                }
            }
        }
        self.step_count += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let bc1 = 1.0 - b1.powi(self.step_count as i32);
        let bc2 = 1.0 - b2.powi(self.step_count as i32);
        for (name, t) in params.iter_mut() {
            let len = t.len();
            let mom = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; len], v: vec![0.0; len] });
            let g = t.grad().unwrap().to_vec();
            let data = t.data_mut();
            for i in 0..len {
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g[i];
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
