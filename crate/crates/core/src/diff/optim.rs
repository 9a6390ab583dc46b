use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters; [`OptimizerSpec::build`] makes a fresh state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn build(&self) -> Optimizer {
        Optimizer {
            spec: *self,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Number of completed `step` calls.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the stored grads, then zeroes them.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(e) = params.entries().iter().find(|e| !e.grad.is_finite()) {
            return Err(Error::Numeric(format!("gradient of `{}`", e.name)));
        }
        let lr = self.spec.lr;
        match self.spec.kind {
            OptimizerKind::Sgd => {
                for e in params.entries_mut() {
                    for (p, g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.values().map(|t| Tensor::zeros(t.shape())).collect();
                    self.v = self.m.clone();
                } else if self.m.len() != params.len() {
                    return Err(Error::Contract(
                        "optimizer state does not match parameter store".into(),
                    ));
                }
                let (b1, b2, eps) = (self.spec.beta1, self.spec.beta2, self.spec.eps);
                let t = (self.t + 1) as i32;
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                for ((e, m), v) in params.entries_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let grad = e.grad.data();
                    for (((p, &g), mi), vi) in e
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grad)
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        self.t += 1;
        params.zero_grad();
        Ok(())
    }
}
