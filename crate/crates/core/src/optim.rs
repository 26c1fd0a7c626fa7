//! SGD and AdamW over layered parameters.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::arg("optimizer hyperparameters out of range"))
        }
    }
}

/// Scalars an optimizer can update in place.
pub trait Real: Copy + Into<f64> {
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Optimizer hyperparameters plus the per-parameter moments AdamW tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// `shapes` are the element counts of each parameter array.
    pub fn new(config: OptimizerConfig, shapes: impl IntoIterator<Item = usize>) -> Result<Self> {
        config.validate()?;
        let (first_moment, second_moment) = match config.kind {
            OptimizerKind::AdamW => {
                let zeros: Vec<Vec<f64>> = shapes.into_iter().map(|n| vec![0.0; n]).collect();
                (zeros.clone(), zeros)
            }
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(OptimizerState {
            config,
            step_count: 0,
            first_moment,
            second_moment,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// One update of `params[j][e]` from `grads[j][e]`.
    pub fn step<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::shape("gradient shape does not match parameters"));
        }
        self.step_count += 1;
        let cfg = self.config;
        let lr = cfg.learning_rate;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (layer, grad) in params.iter_mut().zip(grads) {
                    for (p, &g) in layer.iter_mut().zip(grad) {
                        let v: f64 = (*p).into();
                        *p = T::from_f64(v - lr * (g + cfg.weight_decay * v));
                    }
                }
            }
            OptimizerKind::AdamW => {
                if self.first_moment.len() != grads.len()
                    || self.first_moment.iter().zip(grads).any(|(m, g)| m.len() != g.len())
                {
                    return Err(Error::shape("optimizer moments do not match parameters"));
                }
                let t = self.step_count as i32;
                let bias1 = 1.0 - libm::pow(cfg.beta1, t as f64);
                let bias2 = 1.0 - libm::pow(cfg.beta2, t as f64);
                for (j, (layer, grad)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[j];
                    let v = &mut self.second_moment[j];
                    for e in 0..grad.len() {
                        let g = grad[e];
                        m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g;
                        v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g * g;
                        let m_hat = m[e] / bias1;
                        let v_hat = v[e] / bias2;
                        let value: f64 = layer[e].into();
                        let update = m_hat / (libm::sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * value;
                        layer[e] = T::from_f64(value - lr * update);
                    }
                }
            }
        }
        Ok(())
    }
}
