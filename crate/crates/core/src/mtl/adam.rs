use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::models::ParamKey;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction; moments are kept per parameter so frozen
/// tensors do not advance their step counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// One update; `weight_decay` adds `weight_decay·θ` to the gradient first.
    pub fn step(&mut self, key: ParamKey, data: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let s = self.state.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; data.len()],
            v: vec![0.0; data.len()],
            t: 0,
        });
        s.t += 1;
        let c1 = 1.0 - beta1.powi(s.t as i32);
        let c2 = 1.0 - beta2.powi(s.t as i32);
        for i in 0..data.len() {
            let g = grad[i] + weight_decay * data[i];
            s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
            s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
            data[i] -= lr * (s.m[i] / c1) / ((s.v[i] / c2).sqrt() + eps);
        }
    }

    /// Drops the moments of one parameter (used when a group is regrown or a head replaced).
    pub fn reset(&mut self, key: ParamKey) {
        self.state.remove(&key);
    }
}
