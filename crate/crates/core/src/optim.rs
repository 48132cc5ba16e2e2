//! Adaptive-moment optimizer and the step learning-rate schedule shared by
//! pre-training and fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::tensorcore::{Graph, Var};

/// `base · 0.5^(number of halving points ≤ iteration)`.
pub fn lr_at(base: f64, halving_points: &[u64], iteration: u64) -> f64 {
    let passed = halving_points.iter().filter(|&&h| h <= iteration).count();
    base * 0.5f64.powi(passed as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescales the joint gradient to at most this L2 norm when set.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

/// Adam without weight decay. Moment buffers are created the first time a
/// tensor receives a gradient, so frozen tensors carry no state.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: BTreeMap::new() }
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// Applies one update to every bound tensor that received a gradient and
    /// returns the pre-clipping global gradient norm.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        graph: &Graph<f32>,
        bindings: &BTreeMap<String, Var>,
        lr: f64,
    ) -> f64 {
        let grads: Vec<(&String, &[f32])> = bindings
            .iter()
            .filter(|(_, v)| graph.requires_grad(**v))
            .filter_map(|(n, v)| graph.grad(*v).map(|g| (n, g)))
            .collect();
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            let step = (lr * c2.sqrt() / c1) as f32;
            let eps_hat = (eps * c2.sqrt()) as f32;
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps_hat);
            }
        }
        norm
    }
}
