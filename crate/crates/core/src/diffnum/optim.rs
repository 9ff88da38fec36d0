use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{invalid, Error, Result};

fn check_step(store: &ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grads.arrays().len() != store.len() {
        return Err(Error::Shape("gradients do not match the parameter store".into()));
    }
    for (e, g) in store.entries().iter().zip(grads.arrays()) {
        if g.len() != e.data.len() {
            return Err(Error::Shape(format!("gradient for `{}` has wrong length", e.name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { name: e.name.clone() });
        }
    }
    Ok(())
}

/// `params ← params − lr·grads`. Rejects the whole step, leaving `store`
/// untouched, if any gradient entry is NaN or infinite.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    check_step(store, grads, lr)?;
    for (e, g) in store.entries_mut().iter_mut().zip(grads.arrays()) {
        for (p, d) in e.data.iter_mut().zip(g) {
            *p -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Stateful first-order optimizer over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        match self.config {
            OptimizerConfig::Sgd { lr } => sgd_step(store, grads, lr),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                check_step(store, grads, lr)?;
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (e, g)) in store.entries_mut().iter_mut().zip(grads.arrays()).enumerate() {
                    for (k, (p, d)) in e.data.iter_mut().zip(g).enumerate() {
                        let m = &mut self.m[i][k];
                        let v = &mut self.v[i][k];
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                }
                Ok(())
            }
        }
    }
}
