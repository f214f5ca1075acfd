use serde::{Deserialize, Serialize};

use super::tensor::ParameterSet;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every parameter in a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update from the gradients stored in `params`,
    /// which are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                format!("state tracks {} parameters, set has {}", self.m.len(), params.len()),
            ));
        }
        for id in params.ids() {
            let t = params.get(id);
            if t.numel() != self.m[id.index()].len() {
                return Err(shape_err("adam_step", format!("parameter {} changed size", params.name(id))));
            }
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "adam_step" });
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in params.ids() {
            let i = id.index();
            let tensor = params.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, theta) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut ParameterSet) -> Result<()> {
    state.step(params)
}
