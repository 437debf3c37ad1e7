//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    /// `learning_rate` 0 is accepted so a run can be replayed without
    /// updates; negative or non-finite values are not.
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(OptimError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A named trainable tensor.
///
/// `frozen` excludes the whole tensor from updates. `update_mask`, when set,
/// excludes individual elements (false = locked).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
    pub update_mask: Option<Vec<bool>>,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Param {
            name: name.into(),
            tensor,
            frozen: false,
            update_mask: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self, index: usize) -> Option<&[f32]> {
        self.velocity.get(index).map(Vec::as_slice)
    }

    /// `v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v`,
    /// then zeroes the gradients. Frozen parameters and locked elements are
    /// skipped. Velocity buffers grow with their parameter (new entries
    /// start at zero), which covers classifier-head expansion.
    pub fn step(&mut self, params: &mut [Param]) -> Result<(), OptimError> {
        if let Some(p) = params
            .iter()
            .find(|p| !p.frozen && p.tensor.grad().is_none())
        {
            return Err(OptimError::MissingGradient(p.name.clone()));
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize_with(params.len(), Vec::new);
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
            ..
        } = self.config;
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if p.frozen {
                p.tensor.zero_grad();
                continue;
            }
            let n = p.tensor.numel();
            v.resize(n, 0.0);
            let grad = p.tensor.take_grad().expect("checked above");
            let mask = p.update_mask.as_deref();
            let data = p.tensor.data_mut();
            for j in 0..n {
                if mask.is_some_and(|m| !m[j]) {
                    continue;
                }
                v[j] = momentum * v[j] + grad[j] + wd * data[j];
                data[j] -= lr * v[j];
            }
            let mut grad = grad;
            grad.fill(0.0);
            p.tensor.accumulate_grad(&grad).expect("same length");
        }
        Ok(())
    }
}
