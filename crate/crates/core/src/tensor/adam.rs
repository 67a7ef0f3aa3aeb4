use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. `l2_weight` adds `λ·w` to the gradient of every
/// weight (see [`l2_applies`]) before the moment update, the same as putting
/// `λ/2·‖w‖²` in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub l2_weight: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2_weight: 0.0,
        }
    }
}

/// Biases and normalization gains (names ending in `bias` / `gain`) are not
/// regularized. Decaying them too collapses a strongly regularized MLP to a
/// near-zero random map instead of the near-constant, bias-dominated layer
/// that L2 is meant to produce.
pub fn l2_applies(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last != "bias" && last != "gain"
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: step counter plus per-parameter first/second moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(hyper: AdamConfig) -> Self {
        AdamState {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every parameter.
    ///
    /// Every parameter must have a gradient of the same shape.
    pub fn update<'a, I>(&mut self, params: I, grads: &BTreeMap<String, Tensor>) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor)>,
    {
        let params: Vec<(String, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            match grads.get(name) {
                None => return Err(Error::Contract(format!("no gradient for parameter `{name}`"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::Contract(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (name, p) in params {
            let g = grads[&name].data();
            let l2 = if l2_applies(&name) { h.l2_weight } else { 0.0 };
            let mom = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + l2 * *w;
                mom.m[i] = h.beta1 * mom.m[i] + (1.0 - h.beta1) * gi;
                mom.v[i] = h.beta2 * mom.v[i] + (1.0 - h.beta2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                *w -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
            }
        }
        Ok(())
    }
}
