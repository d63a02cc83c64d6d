//! Adam optimizer over [`ParamModel`]s with named state, so checkpoints can
//! resume training bit-exactly.

use std::collections::HashMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{NnError, Param, ParamModel};
use crate::num::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct MomentPair<T> {
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub state: HashMap<String, MomentPair<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// One update over every parameter of the given models, consuming the
    /// gradients accumulated since the last `zero_grads`.
    pub fn step(&mut self, models: &mut [&mut dyn ParamModel<T>]) -> Result<(), NnError> {
        for m in models.iter() {
            if m.frozen() {
                return Err(NnError::Frozen(m.model_name().to_string()));
            }
        }
        self.t += 1;
        let b1 = T::from_f64_c(self.cfg.beta1);
        let b2 = T::from_f64_c(self.cfg.beta2);
        let lr = T::from_f64_c(self.cfg.lr);
        let eps = T::from_f64_c(self.cfg.eps);
        let one = T::one();
        let bc1 = one - T::from_f64_c(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - T::from_f64_c(self.cfg.beta2.powi(self.t as i32));

        for model in models.iter_mut() {
            let state = &mut self.state;
            model.visit_params(&mut |name: &str, p: &mut Param<T>| {
                let entry = state.entry(name.to_string()).or_insert_with(|| MomentPair {
                    m: ArrayD::zeros(p.value.raw_dim()),
                    v: ArrayD::zeros(p.value.raw_dim()),
                });
                let pv = p.value.as_slice_mut().unwrap();
                let pg = p.grad.as_slice().unwrap();
                let ms = entry.m.as_slice_mut().unwrap();
                let vs = entry.v.as_slice_mut().unwrap();
                for i in 0..pv.len() {
                    let g = pg[i];
                    ms[i] = b1 * ms[i] + (one - b1) * g;
                    vs[i] = b2 * vs[i] + (one - b2) * g * g;
                    let m_hat = ms[i] / bc1;
                    let v_hat = vs[i] / bc2;
                    pv[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
