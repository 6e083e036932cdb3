//! Task distributions: sinusoid regression and synthetic N-way K-shot
//! Gaussian-cluster classification.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::Write;
use std::sync::Arc;

use metacoop_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CoreError, Result};
use crate::rng::{Stream, TaskRng};

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINE_PHASE: (f64, f64) = (0.0, std::f64::consts::PI);
pub const SINE_INPUT: (f64, f64) = (-5.0, 5.0);
const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `[n, 1]` real targets.
    Regression(Tensor),
    /// Class indices in `0..n_way`.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(t) => t.shape()[0],
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[n, input_dim]`
    pub inputs: Tensor,
    pub targets: Targets,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskMeta {
    Sine {
        amplitude: f64,
        phase: f64,
    },
    Cluster {
        /// Prototype centres in sampling order.
        prototypes: Vec<Vec<f64>>,
        /// Class label assigned to each prototype position.
        labels: Vec<usize>,
        spread: f64,
    },
}

/// One few-shot problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: Split,
    pub query: Split,
    pub meta: TaskMeta,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self.meta {
            TaskMeta::Sine { .. } => TaskKind::Regression,
            TaskMeta::Cluster { .. } => TaskKind::Classification,
        }
    }

    /// Flat JSON record used by task dumps.
    pub fn to_json(&self) -> serde_json::Value {
        let split = |s: &Split| {
            let targets = match &s.targets {
                Targets::Regression(t) => json!(t.data()),
                Targets::Classes(c) => json!(c),
            };
            json!({ "shape": s.inputs.shape(), "x": s.inputs.data(), "y": targets })
        };
        let metadata = match &self.meta {
            TaskMeta::Sine { amplitude, phase } => json!({ "amplitude": amplitude, "phase": phase }),
            TaskMeta::Cluster {
                prototypes,
                labels,
                spread,
            } => json!({ "prototypes": prototypes, "labels": labels, "spread": spread }),
        };
        json!({
            "kind": self.kind(),
            "metadata": metadata,
            "support": split(&self.support),
            "query": split(&self.query),
        })
    }
}

/// Writes one JSON object per task per line.
pub fn write_task_dump<W: Write>(tasks: &[Task], mut out: W) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut out, &t.to_json()).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn sine_split(xs: Vec<f64>, amplitude: f64, phase: f64) -> Split {
    let n = xs.len();
    let ys: Vec<f64> = xs.iter().map(|&x| amplitude * (x + phase).sin()).collect();
    Split {
        inputs: Tensor::matrix(n, 1, xs).expect("column shape"),
        targets: Targets::Regression(Tensor::matrix(n, 1, ys).expect("column shape")),
    }
}

fn sine_params(rng: &mut TaskRng) -> (f64, f64) {
    let amplitude = rng.uniform(SINE_AMPLITUDE.0, SINE_AMPLITUDE.1);
    let phase = rng.uniform(SINE_PHASE.0, SINE_PHASE.1);
    (amplitude, phase)
}

fn sine_inputs(rng: &mut TaskRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(SINE_INPUT.0, SINE_INPUT.1)).collect()
}

/// `y = A sin(x + b)` with `A ~ U[0.1, 5]`, `b ~ U[0, pi]`, `x ~ U[-5, 5]`;
/// support and query drawn independently.
pub fn sample_sine_task(rng: &mut TaskRng, k_shot: usize, query_size: usize) -> Result<Task> {
    if k_shot == 0 || query_size == 0 {
        return Err(CoreError::TaskGen(
            "sine task needs k_shot >= 1 and query_size >= 1".into(),
        ));
    }
    let (amplitude, phase) = sine_params(rng);
    let xs = sine_inputs(rng, k_shot);
    let support = sine_split(xs, amplitude, phase);
    let xq = sine_inputs(rng, query_size);
    let query = sine_split(xq, amplitude, phase);
    Ok(Task {
        support,
        query,
        meta: TaskMeta::Sine { amplitude, phase },
    })
}

/// `grid` evenly spaced points on `[-5, 5]`, endpoints included.
pub fn sine_grid(grid: usize) -> Vec<f64> {
    let (lo, hi) = SINE_INPUT;
    match grid {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..grid)
            .map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64)
            .collect(),
    }
}

/// Evaluation variant: random K-shot support, query on a dense fixed grid.
pub fn sample_sine_test_task(rng: &mut TaskRng, k_shot: usize, grid: usize) -> Result<Task> {
    if k_shot == 0 || grid == 0 {
        return Err(CoreError::TaskGen(
            "sine test task needs k_shot >= 1 and grid >= 1".into(),
        ));
    }
    let (amplitude, phase) = sine_params(rng);
    let xs = sine_inputs(rng, k_shot);
    let support = sine_split(xs, amplitude, phase);
    let query = sine_split(sine_grid(grid), amplitude, phase);
    Ok(Task {
        support,
        query,
        meta: TaskMeta::Sine { amplitude, phase },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            query_per_class: 15,
            dim: 20,
            spread: 0.3,
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Prototypes uniform in `[-1, 1]^dim`, pairwise at least `2 * spread` apart;
/// samples Gaussian around them with standard deviation `spread`; labels
/// permuted per task.
pub fn sample_cluster_task(rng: &mut TaskRng, p: ClusterParams) -> Result<Task> {
    if p.n_way < 2 || p.dim < 2 || p.k_shot == 0 || p.query_per_class == 0 {
        return Err(CoreError::TaskGen(format!(
            "cluster task needs n_way >= 2, dim >= 2, k_shot >= 1, query_per_class >= 1: {p:?}"
        )));
    }
    if !(p.spread > 0.0 && p.spread.is_finite()) {
        return Err(CoreError::TaskGen(format!("spread must be positive, got {}", p.spread)));
    }
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(p.n_way);
    let mut attempts = 0;
    while prototypes.len() < p.n_way {
        if attempts >= MAX_PROTOTYPE_ATTEMPTS {
            return Err(CoreError::TaskGen(format!(
                "could not place {} prototypes {} apart in {} dims after {attempts} attempts",
                p.n_way,
                2.0 * p.spread,
                p.dim
            )));
        }
        attempts += 1;
        let candidate: Vec<f64> = (0..p.dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        if prototypes.iter().all(|q| distance(q, &candidate) >= 2.0 * p.spread) {
            prototypes.push(candidate);
        }
    }
    let mut labels: Vec<usize> = (0..p.n_way).collect();
    rng.shuffle(&mut labels);

    let mut draw = |per_class: usize| {
        let mut xs = Vec::with_capacity(p.n_way * per_class * p.dim);
        let mut ys = Vec::with_capacity(p.n_way * per_class);
        for (proto, &label) in prototypes.iter().zip(&labels) {
            for _ in 0..per_class {
                xs.extend(proto.iter().map(|&c| c + p.spread * rng.standard_normal()));
                ys.push(label);
            }
        }
        Split {
            inputs: Tensor::matrix(ys.len(), p.dim, xs).expect("consistent cluster shape"),
            targets: Targets::Classes(ys),
        }
    };
    let support = draw(p.k_shot);
    let query = draw(p.query_per_class);
    Ok(Task {
        support,
        query,
        meta: TaskMeta::Cluster {
            prototypes,
            labels,
            spread: p.spread,
        },
    })
}

/// Task-family settings as they appear in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub family: String,
    pub k_shot: usize,
    /// Sinusoid meta-training query size; `10 * k_shot` when absent.
    pub query_size: Option<usize>,
    /// Sinusoid evaluation grid size.
    pub test_grid: usize,
    pub n_way: usize,
    pub query_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let c = ClusterParams::default();
        Self {
            family: "sine".into(),
            k_shot: 5,
            query_size: None,
            test_grid: 100,
            n_way: c.n_way,
            query_per_class: c.query_per_class,
            dim: c.dim,
            spread: c.spread,
        }
    }
}

impl TaskConfig {
    pub fn resolved_query_size(&self) -> usize {
        self.query_size.unwrap_or(10 * self.k_shot)
    }

    fn cluster(&self) -> ClusterParams {
        ClusterParams {
            n_way: self.n_way,
            k_shot: self.k_shot,
            query_per_class: self.query_per_class,
            dim: self.dim,
            spread: self.spread,
        }
    }
}

/// A task distribution. Implementations are looked up by name in a
/// [`FamilyRegistry`].
pub trait TaskFamily: Send + Sync + Debug {
    fn name(&self) -> &'static str;
    fn kind(&self) -> TaskKind;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn sample_train(&self, rng: &mut TaskRng) -> Result<Task>;
    fn sample_test(&self, rng: &mut TaskRng) -> Result<Task>;
}

#[derive(Debug)]
pub struct SineFamily {
    pub k_shot: usize,
    pub query_size: usize,
    pub test_grid: usize,
}

impl TaskFamily for SineFamily {
    fn name(&self) -> &'static str {
        "sine"
    }

    fn kind(&self) -> TaskKind {
        TaskKind::Regression
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn sample_train(&self, rng: &mut TaskRng) -> Result<Task> {
        sample_sine_task(rng, self.k_shot, self.query_size)
    }

    fn sample_test(&self, rng: &mut TaskRng) -> Result<Task> {
        sample_sine_test_task(rng, self.k_shot, self.test_grid)
    }
}

#[derive(Debug)]
pub struct ClusterFamily {
    pub params: ClusterParams,
}

impl TaskFamily for ClusterFamily {
    fn name(&self) -> &'static str {
        "cluster"
    }

    fn kind(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn input_dim(&self) -> usize {
        self.params.dim
    }

    fn output_dim(&self) -> usize {
        self.params.n_way
    }

    fn sample_train(&self, rng: &mut TaskRng) -> Result<Task> {
        sample_cluster_task(rng, self.params)
    }

    fn sample_test(&self, rng: &mut TaskRng) -> Result<Task> {
        sample_cluster_task(rng, self.params)
    }
}

pub type FamilyBuilder = fn(&TaskConfig) -> Result<Arc<dyn TaskFamily>>;

/// Task families by name.
pub struct FamilyRegistry {
    builders: BTreeMap<String, FamilyBuilder>,
}

impl Default for FamilyRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("sine", |c| {
            if c.k_shot == 0 || c.test_grid == 0 || c.resolved_query_size() == 0 {
                return Err(CoreError::InvalidConfig(
                    "sine family needs k_shot, query_size and test_grid >= 1".into(),
                ));
            }
            Ok(Arc::new(SineFamily {
                k_shot: c.k_shot,
                query_size: c.resolved_query_size(),
                test_grid: c.test_grid,
            }))
        });
        r.register("cluster", |c| {
            let params = c.cluster();
            // Surface invalid settings at construction rather than mid-run.
            sample_cluster_task(&mut TaskRng::new(0), params)?;
            Ok(Arc::new(ClusterFamily { params }))
        });
        r
    }
}

impl FamilyRegistry {
    pub fn register(&mut self, name: &str, builder: FamilyBuilder) {
        self.builders.insert(name.to_ascii_lowercase(), builder);
    }

    pub fn names(&self) -> Vec<String> {
        self.builders.keys().cloned().collect()
    }

    pub fn build(&self, config: &TaskConfig) -> Result<Arc<dyn TaskFamily>> {
        let builder = self
            .builders
            .get(&config.family.to_ascii_lowercase())
            .ok_or_else(|| CoreError::Unknown {
                kind: "task family",
                name: config.family.clone(),
                known: self.names().join(", "),
            })?;
        builder(config)
    }
}

/// The `n` tasks of outer iteration `iteration`; task `i` comes from its own
/// substream.
pub fn train_batch(family: &dyn TaskFamily, seed: u64, iteration: u64, n: usize) -> Result<Vec<Task>> {
    let root = TaskRng::new(seed);
    (0..n as u64)
        .map(|i| family.sample_train(&mut root.substream(Stream::Train, iteration * n as u64 + i)))
        .collect()
}

/// Fixed evaluation tasks; independent of the training stream.
pub fn eval_tasks(family: &dyn TaskFamily, seed: u64, count: usize) -> Result<Vec<Task>> {
    let root = TaskRng::new(seed);
    (0..count as u64)
        .map(|j| family.sample_test(&mut root.substream(Stream::Eval, j)))
        .collect()
}

/// Fixed probe tasks for representation diagnostics.
pub fn probe_tasks(family: &dyn TaskFamily, seed: u64, count: usize) -> Result<Vec<Task>> {
    let root = TaskRng::new(seed);
    (0..count as u64)
        .map(|j| family.sample_train(&mut root.substream(Stream::Probe, j)))
        .collect()
}
