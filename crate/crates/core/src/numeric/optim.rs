//! SGD-with-momentum and Adam over named parameter sets.
//!
//! Weight decay is applied as an L2 term folded into the gradient before the
//! moment updates, matching the convention of the mainstream deep-learning
//! stacks this mirrors. A step requires every trainable parameter to carry a
//! populated gradient buffer; it clears all gradients afterwards and bumps a
//! monotone step counter. Frozen parameters are never touched, even when a
//! gradient buffer was left on them by accident.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: hyperparameters plus per-parameter moment buffers and a
/// step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    moments: BTreeMap<String, Moments>,
    step_count: u64,
}

impl Optimizer {
    pub fn sgd_momentum(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {momentum}"
            )));
        }
        Ok(Optimizer {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            weight_decay,
            moments: BTreeMap::new(),
            step_count: 0,
        })
    }

    pub fn adam(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0,1), got {beta1}, {beta2}"
            )));
        }
        Ok(Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.0,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            moments: BTreeMap::new(),
            step_count: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Replaces the learning rate (used by epoch-wise decay schedules).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every trainable parameter, clears all gradient
    /// buffers, and increments the step counter.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        // Validate first so a failed step leaves parameters untouched.
        for (name, p) in params.iter() {
            if p.trainable && p.value.grad().is_none() {
                return Err(Error::Usage(format!(
                    "step before backward: trainable parameter {name:?} has no gradient"
                )));
            }
        }
        let t = self.step_count + 1;
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let moments = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            if moments.first.len() != n {
                return Err(Error::Internal(format!(
                    "moment buffer length mismatch for {name:?}"
                )));
            }
            let grad = p.value.grad().expect("validated above").to_vec();
            let data = p.value.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for i in 0..n {
                        let g = grad[i] + self.weight_decay * data[i];
                        let v = self.momentum * moments.first[i] + g;
                        moments.first[i] = v;
                        data[i] -= self.learning_rate * v;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - self.beta1.powi(t as i32);
                    let bc2 = 1.0 - self.beta2.powi(t as i32);
                    for i in 0..n {
                        let g = grad[i] + self.weight_decay * data[i];
                        moments.first[i] = self.beta1 * moments.first[i] + (1.0 - self.beta1) * g;
                        moments.second[i] =
                            self.beta2 * moments.second[i] + (1.0 - self.beta2) * g * g;
                        let m_hat = moments.first[i] / bc1;
                        let v_hat = moments.second[i] / bc2;
                        data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
            if !p.value.all_finite() {
                return Err(Error::Numeric {
                    node: 0,
                    op: "optimizer_step",
                    message: format!("non-finite parameter {name:?} after update"),
                });
            }
        }
        params.clear_grads();
        self.step_count = t;
        Ok(())
    }
}
