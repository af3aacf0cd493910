use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.kind != OptimizerKind::Sgd {
            for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(format!("{name} must lie in [0, 1)")));
                }
            }
            if self.epsilon < 0.0 {
                return Err(Error::config("epsilon must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Per-client optimizer with its moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    /// Applies one update in place.
    ///
    /// SGD uses coupled decay `w -= lr (g + wd w)`; Adam folds `wd w` into the
    /// gradient as well, while AdamW shrinks the weights by `lr wd` before the
    /// bias-corrected moment step.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.check_same_shape(grad)?;
        if self.first_moment.len() != params.len() {
            return Err(Error::DimensionMismatch(
                "optimizer state does not match parameter count".into(),
            ));
        }
        if !grad.is_finite() {
            return Err(Error::Divergence("gradient"));
        }
        let OptimizerConfig {
            kind,
            learning_rate: lr,
            weight_decay: wd,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;

        match kind {
            OptimizerKind::Sgd => {
                for (w, g) in params.values.iter_mut().zip(&grad.values) {
                    *w -= lr * (g + wd * *w);
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let t = self.step_count as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                let decoupled = kind == OptimizerKind::AdamW;
                for (((w, g), m), v) in params
                    .values
                    .iter_mut()
                    .zip(&grad.values)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    let g = if decoupled {
                        *w *= 1.0 - lr * wd;
                        *g
                    } else {
                        g + wd * *w
                    };
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Divergence("parameters"));
        }
        Ok(())
    }
}
