//! Cooperative meta-learning: MAML with an outer-loop-only co-learner head,
//! its baselines, task families and gradient diagnostics.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod engine;
mod error;
pub mod method;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod tasks;

pub use config::{MetaConfig, OptimizerConfig};
pub use engine::{meta_test, MetaTrainer, StepReport, TestMode, TestReport};
pub use error::{CoreError, Result};
pub use method::{MetaMethod, MethodRegistry};
pub use nn::{init_params, MlpSpec, ParamSet, Partition};
pub use optim::{OptState, OptimizerRegistry, OuterOptimizer};
pub use tasks::{FamilyRegistry, Task, TaskConfig, TaskFamily};
