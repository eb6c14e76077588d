//! Adam with coupled L2 weight decay, and the polynomial learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Added to the gradient as `weight_decay · θ` before the moment
    /// updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// Adam moments for one parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One update with learning rate `cfg.learning_rate · lr_scale`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr_scale: f64) -> Result<()> {
        if grads.values.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid("gradient layout does not match the parameters"));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let lr = learning_rate * lr_scale;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        params.bump_version();
        let values = params.values_mut_unversioned();
        for (i, theta) in values.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.values[i]);
            for j in 0..theta.len() {
                let gj = g[j] + weight_decay * theta[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Polynomial decay `(1 − t/num_epochs)^power`.
pub fn lr_scale(t: usize, num_epochs: usize, power: f64) -> Result<f64> {
    if num_epochs == 0 {
        return Err(Error::invalid("num_epochs must be positive"));
    }
    if t > num_epochs {
        return Err(Error::invalid(format!("epoch {t} beyond num_epochs {num_epochs}")));
    }
    Ok((1.0 - t as f64 / num_epochs as f64).powf(power))
}
