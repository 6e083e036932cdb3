use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Outer-loop optimizer selection. `kind` names an entry in
/// [`crate::optim::OptimizerRegistry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyperparameters of one meta-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Name in [`crate::method::MethodRegistry`].
    pub method: String,
    /// Inner (task-adaptation) step size.
    pub inner_lr: f64,
    /// Outer (meta) step size.
    pub outer_lr: f64,
    /// Weight of the co-learner loss.
    pub gamma: f64,
    pub inner_steps: usize,
    pub task_batch: usize,
    /// Differentiate through the inner updates; otherwise first-order.
    pub second_order: bool,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Build per-task graphs on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            method: "cml".into(),
            inner_lr: 0.01,
            outer_lr: 1e-3,
            gamma: 0.2,
            inner_steps: 1,
            task_batch: 4,
            second_order: true,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            parallel: true,
        }
    }
}

impl MetaConfig {
    pub fn with_method(&self, method: &str) -> Self {
        Self {
            method: method.into(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidConfig(msg));
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return bad(format!("inner_lr must be positive, got {}", self.inner_lr));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if self.task_batch == 0 {
            return bad("task_batch must be at least 1".into());
        }
        Ok(())
    }
}
