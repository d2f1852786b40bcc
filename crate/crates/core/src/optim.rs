//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Decoupled-weight-decay Adam over the model's parameter list, in
/// [`crate::model::PARAM_NAMES`] order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8; moments start at zero.
    pub fn new(lr: f64, weight_decay: f64, params: &ModelParams) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be > 0")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {weight_decay} must be ≥ 0")));
        }
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.data().len()).collect();
        Ok(AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// One update from per-parameter gradients, ordered and sized like
    /// the parameter list.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradient blocks for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (((name, tensor), (m, v)), g) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(grads)
        {
            if g.len() != m.len() {
                return Err(Error::Contract(format!(
                    "{name}: gradient length {} vs parameter length {}",
                    g.len(),
                    m.len()
                )));
            }
            let data = tensor.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}
