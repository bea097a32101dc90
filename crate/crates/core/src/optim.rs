//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { algorithm: Algorithm::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { algorithm: Algorithm::Sgd, lr, ..Self::default() }
    }

    pub fn adam(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Optimizer with its per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place and clears every gradient slot.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.get(id).grad().is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", params.name(id))));
        }
        let lr = T::of(self.config.lr);
        match self.config.algorithm {
            Algorithm::Sgd => {
                for t in params.tensors_mut() {
                    let g = t.grad().expect("checked above").to_vec();
                    for (w, d) in t.values_mut().iter_mut().zip(g) {
                        *w = *w - lr * d;
                    }
                }
            }
            Algorithm::Adam => {
                if self.first.is_empty() {
                    for t in params.tensors_mut() {
                        self.first.push(vec![T::zero(); t.len()]);
                        self.second.push(vec![T::zero(); t.len()]);
                    }
                }
                self.step += 1;
                let b1 = T::of(self.config.beta1);
                let b2 = T::of(self.config.beta2);
                let eps = T::of(self.config.eps);
                let t_step = self.step as i32;
                let c1 = T::one() - b1.powi(t_step);
                let c2 = T::one() - b2.powi(t_step);
                for ((t, m), v) in params.tensors_mut().zip(&mut self.first).zip(&mut self.second) {
                    let g = t.grad().expect("checked above").to_vec();
                    for (((w, d), m), v) in t.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        params.clear_grad();
        Ok(())
    }
}
