use serde::{Deserialize, Serialize};

use super::{Gradients, MlpParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// First and second moment accumulators for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        AdamState {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
            config,
        }
    }

    /// In-place bias-corrected Adam update. Parameters are left untouched
    /// when any gradient block is non-finite.
    pub fn update(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
        if let Some(block) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient {block}")));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (li, layer) in params.layers_mut().iter_mut().enumerate() {
            let blocks = [
                (&mut layer.weight, &grads.weights[li], &mut self.m.weights[li], &mut self.v.weights[li]),
                (&mut layer.bias, &grads.biases[li], &mut self.m.biases[li], &mut self.v.biases[li]),
            ];
            for (p, g, m, v) in blocks {
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                for ((p, &g), (m, v)) in it {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::update`].
pub fn adam_step(params: &MlpParams, grads: &Gradients, state: &AdamState) -> Result<(MlpParams, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.update(&mut p, grads)?;
    Ok((p, s))
}

/// Adam for a single scalar parameter (the entropy temperature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ScalarAdam {
    m: f64,
    v: f64,
    step: u64,
    config: AdamConfig,
}

impl ScalarAdam {
    pub(crate) fn new(config: AdamConfig) -> Self {
        ScalarAdam { m: 0.0, v: 0.0, step: 0, config }
    }

    pub(crate) fn update(&mut self, param: &mut f64, grad: f64) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        self.m = beta1 * self.m + (1.0 - beta1) * grad;
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad;
        let mh = self.m / (1.0 - beta1.powf(self.step as f64));
        let vh = self.v / (1.0 - beta2.powf(self.step as f64));
        *param -= lr * mh / (vh.sqrt() + eps);
    }
}
