use std::collections::BTreeMap;

use super::params::{ParamSet, Selector};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

/// ADAM moments and hyperparameters.
///
/// Moments are created lazily the first time a parameter is stepped, so a
/// parameter that is never selected keeps no state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global step counter, incremented once per `step`.
    pub t: u64,
    pub(crate) moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates this parameter received; drives bias correction.
    pub t: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Per-parameter learning-rate overrides are expressed by calling `step`
    /// with a different selector and a temporary `lr`.
    pub fn step(&mut self, params: &mut ParamSet, selector: &Selector) -> Result<()> {
        self.step_with_lr(params, selector, self.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamSet, selector: &Selector, lr: f64) -> Result<()> {
        if let Some(e) = params.iter().find(|e| selector.selects(e) && e.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(e.name.clone()));
        }
        self.t += 1;
        for entry in params.iter_mut().filter(|e| selector.selects(e)) {
            let grad = entry.tensor.grad().expect("checked above").to_vec();
            let n = grad.len();
            let mom = self.moments.entry(entry.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            mom.t += 1;
            let bc1 = 1.0 - self.beta1.powi(mom.t as i32);
            let bc2 = 1.0 - self.beta2.powi(mom.t as i32);
            let data = entry.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            entry.tensor.clear_grad();
        }
        Ok(())
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}
