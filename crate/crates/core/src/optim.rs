//! Outer-loop optimizers over whole [`ParamSet`]s.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use metacoop_autodiff::Tensor;

use crate::config::OptimizerConfig;
use crate::error::{CoreError, Result};
use crate::nn::ParamSet;

/// Step counter and per-parameter moment accumulators. Moments are empty for
/// optimizers that keep none.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

pub trait OuterOptimizer: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn init_state(&self, params: &ParamSet) -> OptState;

    /// One update with step size `lr`.
    fn step(&self, params: &ParamSet, grads: &[Tensor], state: &mut OptState, lr: f64) -> Result<ParamSet>;
}

fn check_grads(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() || grads.iter().zip(params.values()).any(|(g, p)| g.shape() != p.shape()) {
        return Err(CoreError::LengthMismatch(
            "gradients do not match the parameter layout".into(),
        ));
    }
    if let Some(((info, _), _)) = params.iter().zip(grads).find(|(_, g)| !g.is_finite()) {
        return Err(CoreError::NonFiniteGradient(info.name.clone()));
    }
    Ok(())
}

/// `p <- p - lr * g`
#[derive(Debug, Default)]
pub struct Sgd;

impl OuterOptimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn init_state(&self, _params: &ParamSet) -> OptState {
        OptState::default()
    }

    fn step(&self, params: &ParamSet, grads: &[Tensor], state: &mut OptState, lr: f64) -> Result<ParamSet> {
        check_grads(params, grads)?;
        state.step += 1;
        let values = params
            .values()
            .iter()
            .zip(grads)
            .map(|(p, g)| {
                let mut out = p.clone();
                for (v, d) in out.data_mut().iter_mut().zip(g.data()) {
                    *v -= lr * d;
                }
                out
            })
            .collect();
        params.with_values(values)
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OuterOptimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn init_state(&self, params: &ParamSet) -> OptState {
        let zeros: Vec<Tensor> = params.values().iter().map(Tensor::zeros_like).collect();
        OptState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    fn step(&self, params: &ParamSet, grads: &[Tensor], state: &mut OptState, lr: f64) -> Result<ParamSet> {
        check_grads(params, grads)?;
        if state.first.len() != params.len() || state.second.len() != params.len() {
            *state = OptState {
                step: state.step,
                ..self.init_state(params)
            };
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut values = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
            let mut out = p.clone();
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            for (j, (w, &d)) in out.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            values.push(out);
        }
        params.with_values(values)
    }
}

type Factory = fn(&OptimizerConfig) -> Arc<dyn OuterOptimizer>;

/// Optimizers by (case-insensitive) name.
pub struct OptimizerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for OptimizerRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("sgd", |_| Arc::new(Sgd));
        r.register("adam", |c| {
            Arc::new(Adam {
                beta1: c.beta1,
                beta2: c.beta2,
                eps: c.eps,
            })
        });
        r
    }
}

impl OptimizerRegistry {
    pub fn register(&mut self, name: &str, factory: Factory) {
        self.factories.insert(name.to_ascii_lowercase(), factory);
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn build(&self, cfg: &OptimizerConfig) -> Result<Arc<dyn OuterOptimizer>> {
        let factory = self
            .factories
            .get(&cfg.kind.to_ascii_lowercase())
            .ok_or_else(|| CoreError::Unknown {
                kind: "optimizer",
                name: cfg.kind.clone(),
                known: self.names().join(", "),
            })?;
        Ok(factory(cfg))
    }
}

/// Applies one optimizer update, returning the new parameters and state.
pub fn outer_step(
    optimizer: &dyn OuterOptimizer,
    params: &ParamSet,
    mut state: OptState,
    grads: &[Tensor],
    lr: f64,
) -> Result<(ParamSet, OptState)> {
    let next = optimizer.step(params, grads, &mut state, lr)?;
    Ok((next, state))
}
