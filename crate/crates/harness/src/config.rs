//! Run configuration: a TOML file with the sections `run`, `task`, `model`,
//! `method`, `optimizer`, `eval` and `output`. Every key is optional.

use std::path::{Path, PathBuf};

use metacoop_core::tasks::{TaskConfig, TaskKind};
use metacoop_core::{FamilyRegistry, MetaConfig, MlpSpec, OptimizerConfig, TaskFamily};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{HarnessError, Result};

/// Environment variable that replaces `output.root`.
pub const OUT_ENV: &str = "METACOOP_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Root seed for initialization, training, evaluation and probe streams.
    pub seed: u64,
    pub iterations: u64,
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 10_000,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub co_hidden_dims: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = MlpSpec::sinusoid();
        Self {
            hidden_dims: s.hidden_dims,
            co_hidden_dims: s.co_hidden_dims,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,
    pub inner_lr: f64,
    pub gamma: f64,
    pub inner_steps: usize,
    pub task_batch: usize,
    pub second_order: bool,
}

impl Default for MethodSection {
    fn default() -> Self {
        let m = MetaConfig::default();
        Self {
            name: m.method,
            inner_lr: m.inner_lr,
            gamma: m.gamma,
            inner_steps: m.inner_steps,
            task_batch: m.task_batch,
            second_order: m.second_order,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            kind: o.kind,
            lr: MetaConfig::default().outer_lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate every this many iterations; 0 evaluates only at the start
    /// and the end.
    pub every: u64,
    /// Test tasks per evaluation; 600 for regression and 200 for
    /// classification when absent.
    pub test_tasks: Option<usize>,
    /// Record gradient and representation diagnostics every this many
    /// iterations; 0 disables them.
    pub diag_every: u64,
    /// Held-out tasks whose query inputs probe representations.
    pub probe_tasks: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Parent directory of run directories; `METACOOP_OUT` takes precedence.
    pub root: Option<String>,
    /// Run directory name; derived from method, family, shots and seed when
    /// absent.
    pub name: Option<String>,
    /// Write `checkpoint.bin` every this many iterations (0: only at the
    /// end).
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: TaskConfig,
    pub model: ModelSection,
    pub method: MethodSection,
    pub optimizer: OptimizerSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fills every optional value and checks the result.
    pub fn resolve(mut self) -> Result<Self> {
        self.task.query_size = Some(self.task.resolved_query_size());
        let family = self.family()?;
        self.eval.test_tasks.get_or_insert(match family.kind() {
            TaskKind::Regression => 600,
            TaskKind::Classification => 200,
        });
        self.eval.probe_tasks.get_or_insert(32);
        if self.output.root.is_none() {
            self.output.root = Some("runs".into());
        }
        if let Ok(root) = std::env::var(OUT_ENV) {
            if !root.is_empty() {
                self.output.root = Some(root);
            }
        }
        if self.output.name.is_none() {
            self.output.name = Some(format!(
                "{}-{}-k{}-s{}",
                self.method.name.to_ascii_lowercase(),
                self.task.family,
                self.task.k_shot,
                self.run.seed
            ));
        }
        self.meta_config().validate()?;
        metacoop_core::MethodRegistry::default().get(&self.method.name)?;
        metacoop_core::OptimizerRegistry::default().build(&self.meta_config().optimizer)?;
        if self.model.hidden_dims.contains(&0) || self.model.co_hidden_dims.contains(&0) {
            return Err(HarnessError::Config("model widths must be positive".into()));
        }
        Ok(self)
    }

    pub fn family(&self) -> Result<Arc<dyn TaskFamily>> {
        Ok(FamilyRegistry::default().build(&self.task)?)
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            method: self.method.name.clone(),
            inner_lr: self.method.inner_lr,
            outer_lr: self.optimizer.lr,
            gamma: self.method.gamma,
            inner_steps: self.method.inner_steps,
            task_batch: self.method.task_batch,
            second_order: self.method.second_order,
            optimizer: OptimizerConfig {
                kind: self.optimizer.kind.clone(),
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
            },
            seed: self.run.seed,
            parallel: self.run.parallel,
        }
    }

    pub fn model_spec(&self, family: &dyn TaskFamily) -> MlpSpec {
        MlpSpec {
            input_dim: family.input_dim(),
            hidden_dims: self.model.hidden_dims.clone(),
            output_dim: family.output_dim(),
            co_hidden_dims: self.model.co_hidden_dims.clone(),
            activation: Default::default(),
        }
    }

    pub fn test_tasks(&self) -> usize {
        self.eval.test_tasks.unwrap_or(600)
    }

    pub fn probe_tasks(&self) -> usize {
        self.eval.probe_tasks.unwrap_or(32)
    }

    /// Run directory; meaningful after [`RunConfig::resolve`].
    pub fn run_dir(&self) -> PathBuf {
        let root = self.output.root.as_deref().unwrap_or("runs");
        let name = self.output.name.as_deref().unwrap_or("run");
        Path::new(root).join(name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Replaces one value, addressed as `section.key` or by a key name that
    /// is unique across sections. The new value takes the type of the
    /// resolved value it replaces; values derived during resolution (such as
    /// the query size from `k_shot`) are derived again.
    pub fn with_value(&self, axis: &str, raw: &str) -> Result<Self> {
        let to_table = |c: &RunConfig| -> Result<toml::Table> {
            toml::from_str(&c.to_toml()?).map_err(|e| HarnessError::Config(e.to_string()))
        };
        let resolved = to_table(&self.clone().resolve()?)?;
        let (section, key) = locate(&resolved, axis)?;
        let current = resolved
            .get(&section)
            .and_then(|s| s.as_table())
            .and_then(|s| s.get(&key))
            .ok_or_else(|| HarnessError::Config(format!("unknown axis `{axis}`")))?;
        let value = coerce(current, raw).ok_or_else(|| {
            HarnessError::Config(format!(
                "value `{raw}` does not fit axis `{axis}` ({})",
                current.type_str()
            ))
        })?;
        let mut table = to_table(self)?;
        table
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("config sections are tables")
            .insert(key, value);
        let text = toml::to_string(&table).map_err(|e| HarnessError::Config(e.to_string()))?;
        Self::parse(&text)
    }
}

fn locate(table: &toml::Table, axis: &str) -> Result<(String, String)> {
    if let Some((section, key)) = axis.split_once('.') {
        return Ok((section.to_string(), key.to_string()));
    }
    let hits: Vec<String> = table
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(axis)))
        .map(|(s, _)| s.clone())
        .collect();
    match hits.as_slice() {
        [section] => Ok((section.clone(), axis.to_string())),
        [] => Err(HarnessError::Config(format!("unknown axis `{axis}`"))),
        _ => Err(HarnessError::Config(format!(
            "axis `{axis}` is ambiguous; use one of {}",
            hits.iter()
                .map(|s| format!("{s}.{axis}"))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn coerce(current: &toml::Value, raw: &str) -> Option<toml::Value> {
    use toml::Value;
    let raw = raw.trim();
    match current {
        Value::Integer(_) => raw.parse().ok().map(Value::Integer),
        Value::Float(_) => raw.parse().ok().map(Value::Float),
        Value::Boolean(_) => raw.parse().ok().map(Value::Boolean),
        Value::String(_) => Some(Value::String(raw.to_string())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_sinusoid_defaults() {
        let c = RunConfig::parse("").unwrap().resolve().unwrap();
        assert_eq!(c.task.family, "sine");
        assert_eq!(c.task.query_size, Some(50));
        assert_eq!(c.eval.test_tasks, Some(600));
        let m = c.meta_config();
        assert_eq!((m.inner_lr, m.gamma, m.task_batch, m.inner_steps), (0.01, 0.2, 4, 1));
        assert_eq!(c.output.name.as_deref(), Some("cml-sine-k5-s0"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::parse("[task]\nfamily = \"cluster\"\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.eval.test_tasks, Some(200));
        let again = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            RunConfig::parse("[task]\nshots = 3\n"),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("[method]\nname = \"reptile\"\n").unwrap().resolve(),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("[method]\ninner_steps = 0\n").unwrap().resolve(),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn axis_values_take_existing_types() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.with_value("gamma", "1").unwrap().method.gamma, 1.0);
        let ten = c.with_value("k_shot", "10").unwrap().resolve().unwrap();
        assert_eq!((ten.task.k_shot, ten.task.query_size), (10, Some(100)));
        assert_eq!(c.with_value("test_tasks", "7").unwrap().eval.test_tasks, Some(7));
        assert_eq!(c.with_value("method.name", "maml").unwrap().method.name, "maml");
        assert!(c.with_value("k_shot", "ten").is_err());
        assert!(c.with_value("nonsense", "1").is_err());
    }
}
