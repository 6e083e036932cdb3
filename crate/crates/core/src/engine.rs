//! Inner adaptation, outer objectives, the meta-training step and
//! meta-testing.
//!
//! Every task is built on its own [`Graph`]. The batch gradient is the sum of
//! per-task gradients taken in task order, so running tasks on the rayon pool
//! gives bitwise the same result as running them serially.

use std::sync::Arc;

use metacoop_autodiff::{Graph, Tensor, Var};
use rayon::prelude::*;

use crate::config::MetaConfig;
use crate::diagnostics::GradReport;
use crate::error::{CoreError, Result};
use crate::method::{MetaMethod, MethodRegistry};
use crate::nn::{accuracy, forward_co, forward_features, forward_meta, task_loss, ParamSet, ParamVars, Partition};
use crate::optim::{OptState, OptimizerRegistry, OuterOptimizer};
use crate::tasks::{train_batch, Split, Targets, Task, TaskFamily};

/// Loss minimised by the inner loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerObjective {
    /// Meta-learner loss only.
    Meta,
    /// Meta-learner loss plus a weighted co-learner loss.
    MetaPlusCo(f64),
    /// Co-learner loss only.
    Co,
}

/// Loss of `objective` on one split.
pub fn split_loss(g: &Graph, params: &ParamVars, split: &Split, objective: InnerObjective) -> Result<Var> {
    let x = g.input(split.inputs.clone());
    match objective {
        InnerObjective::Meta => {
            let (_, out) = forward_meta(g, params, x)?;
            task_loss(g, out, &split.targets)
        }
        InnerObjective::MetaPlusCo(w) => {
            let (features, out) = forward_meta(g, params, x)?;
            let meta = task_loss(g, out, &split.targets)?;
            let co = task_loss(g, forward_co(g, params, features)?, &split.targets)?;
            Ok(g.add(meta, g.scale(co, w)?)?)
        }
        InnerObjective::Co => {
            let features = forward_features(g, params, x)?;
            task_loss(g, forward_co(g, params, features)?, &split.targets)
        }
    }
}

/// `steps` rounds of plain gradient descent on `objective`, updating only
/// the entries in `partitions`. Other entries keep their original nodes.
///
/// With `second_order` the update chain stays differentiable; otherwise each
/// step's gradient enters as a constant. A zero step size returns `start`
/// unchanged.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    g: &Graph,
    start: &ParamVars,
    split: &Split,
    objective: InnerObjective,
    partitions: &[Partition],
    steps: usize,
    lr: f64,
    second_order: bool,
) -> Result<ParamVars> {
    let mut params = start.clone();
    if lr == 0.0 {
        return Ok(params);
    }
    let layout = start.layout().clone();
    let idx: Vec<usize> = partitions.iter().flat_map(|&p| layout.indices(p)).collect();
    for _ in 0..steps {
        let loss = split_loss(g, &params, split, objective)?;
        let wrt: Vec<Var> = idx.iter().map(|&i| params.var(i)).collect();
        let grads: Vec<Var> = if second_order {
            g.gradient_graph(loss, &wrt)?
        } else {
            g.gradient(loss, &wrt)?.into_iter().map(|t| g.input(t)).collect()
        };
        for (&i, grad) in idx.iter().zip(grads) {
            let step = g.scale(grad, lr)?;
            params.set(i, g.sub(params.var(i), step)?);
        }
    }
    Ok(params)
}

/// Task-specific parameters for `method`: the feature extractor and meta
/// head always adapt; the co-learner adapts only when the method says so.
pub fn inner_adapt(
    g: &Graph,
    meta: &ParamVars,
    support: &Split,
    cfg: &MetaConfig,
    method: &dyn MetaMethod,
) -> Result<ParamVars> {
    let weight = method.inner_co_weight(cfg.gamma);
    let (objective, partitions): (_, &[Partition]) = if method.adapts_co() {
        (InnerObjective::MetaPlusCo(weight), &Partition::ALL)
    } else if weight != 0.0 {
        (
            InnerObjective::MetaPlusCo(weight),
            &[Partition::FeatureExtractor, Partition::MetaHead],
        )
    } else {
        (
            InnerObjective::Meta,
            &[Partition::FeatureExtractor, Partition::MetaHead],
        )
    };
    adapt(
        g,
        meta,
        support,
        objective,
        partitions,
        cfg.inner_steps,
        cfg.inner_lr,
        cfg.second_order,
    )
}

/// Query-side terms of one task after inner adaptation.
#[derive(Clone, Debug)]
pub struct TaskTerms {
    pub meta_loss: Var,
    /// Unweighted co-learner loss, when the method has a co-learner term.
    pub co_loss: Option<Var>,
    pub co_weighted: Option<Var>,
    pub total: Var,
    pub adapted: ParamVars,
}

/// Adapts on the support set and builds the method's query objective
/// `meta + w * co`, where the co-learner reads the adapted features.
pub fn task_objective(
    g: &Graph,
    meta: &ParamVars,
    task: &Task,
    cfg: &MetaConfig,
    method: &dyn MetaMethod,
) -> Result<TaskTerms> {
    let adapted = inner_adapt(g, meta, &task.support, cfg, method)?;
    let x = g.input(task.query.inputs.clone());
    let (features, out) = forward_meta(g, &adapted, x)?;
    let meta_loss = task_loss(g, out, &task.query.targets)?;
    let (co_loss, co_weighted, total) = match method.outer_co_weight(cfg.gamma) {
        Some(w) => {
            let co = task_loss(g, forward_co(g, &adapted, features)?, &task.query.targets)?;
            let weighted = g.scale(co, w)?;
            (Some(co), Some(weighted), g.add(meta_loss, weighted)?)
        }
        None => (None, None, meta_loss),
    };
    Ok(TaskTerms {
        meta_loss,
        co_loss,
        co_weighted,
        total,
        adapted,
    })
}

/// Applies `f` to every task, on the rayon pool when `parallel`, keeping
/// task order.
fn map_tasks<T, F>(tasks: &[Task], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Task) -> Result<T> + Sync + Send,
{
    if parallel {
        tasks.par_iter().map(f).collect()
    } else {
        tasks.iter().map(f).collect()
    }
}

/// Per-task pieces of a batch gradient.
struct TaskGradient {
    total: f64,
    meta_loss: f64,
    co_loss: f64,
    grads: Vec<Tensor>,
    co_moved: bool,
    diag: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

fn task_gradient(
    params: &ParamSet,
    task: &Task,
    cfg: &MetaConfig,
    method: &dyn MetaMethod,
    diagnostics: bool,
) -> Result<TaskGradient> {
    let g = Graph::new();
    let vars = params.bind(&g);
    let terms = task_objective(&g, &vars, task, cfg, method)?;
    let grads = g.gradient(terms.total, vars.vars())?;

    let co_moved = !method.adapts_co()
        && params
            .layout()
            .indices(Partition::CoHead)
            .into_iter()
            .any(|i| !g.value(terms.adapted.var(i)).bit_eq(&params.values()[i]));

    let diag = if diagnostics {
        let meta_grads = g.gradient(terms.meta_loss, vars.vars())?;
        let co_grads = match terms.co_weighted {
            Some(c) => g.gradient(c, vars.vars())?,
            None => params.values().iter().map(Tensor::zeros_like).collect(),
        };
        Some((meta_grads, co_grads))
    } else {
        None
    };
    Ok(TaskGradient {
        total: g.scalar(terms.total),
        meta_loss: g.scalar(terms.meta_loss),
        co_loss: terms.co_loss.map_or(0.0, |c| g.scalar(c)),
        grads,
        co_moved,
        diag,
    })
}

fn add_into(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

/// Summed outer objective over a batch and its gradient with respect to the
/// meta-initialization.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss_sum: f64,
    pub meta_loss_sum: f64,
    /// Unweighted co-learner loss summed over tasks (0 without a co term).
    pub co_loss_sum: f64,
    /// Aligned with the parameter layout; frozen partitions are zeroed.
    pub grads: Vec<Tensor>,
    /// Tasks whose inner loop changed a co-learner that must stay fixed.
    pub freeze_violations: usize,
    /// Separate meta-path and co-path gradients, when requested.
    pub report: Option<GradReport>,
}

pub fn batch_gradient(
    params: &ParamSet,
    tasks: &[Task],
    cfg: &MetaConfig,
    method: &dyn MetaMethod,
    diagnostics: bool,
) -> Result<BatchGradient> {
    let per_task = map_tasks(tasks, cfg.parallel, |t| {
        task_gradient(params, t, cfg, method, diagnostics)
    })?;

    let zeros: Vec<Tensor> = params.values().iter().map(Tensor::zeros_like).collect();
    let mut out = BatchGradient {
        loss_sum: 0.0,
        meta_loss_sum: 0.0,
        co_loss_sum: 0.0,
        grads: zeros.clone(),
        freeze_violations: 0,
        report: diagnostics.then(|| GradReport {
            iteration: 0,
            layout: params.layout().clone(),
            meta: zeros.clone(),
            co: zeros,
        }),
    };
    for t in &per_task {
        out.loss_sum += t.total;
        out.meta_loss_sum += t.meta_loss;
        out.co_loss_sum += t.co_loss;
        add_into(&mut out.grads, &t.grads);
        out.freeze_violations += usize::from(t.co_moved);
        if let (Some(report), Some((m, c))) = (out.report.as_mut(), &t.diag) {
            add_into(&mut report.meta, m);
            add_into(&mut report.co, c);
        }
    }
    for &p in method.frozen_partitions() {
        for i in params.layout().indices(p) {
            out.grads[i] = Tensor::zeros_like(&out.grads[i]);
        }
    }
    Ok(out)
}

/// Summed query objective of `method` over `tasks`.
pub fn outer_loss(params: &ParamSet, tasks: &[Task], cfg: &MetaConfig, method: &dyn MetaMethod) -> Result<f64> {
    let losses = map_tasks(tasks, cfg.parallel, |t| {
        let g = Graph::new();
        let vars = params.bind(&g);
        Ok(g.scalar(task_objective(&g, &vars, t, cfg, method)?.total))
    })?;
    Ok(losses.into_iter().sum())
}

/// Sum of the meta-learner query losses alone (no co-learner term) after
/// each task's inner adaptation under `method`.
pub fn meta_loss_sum(params: &ParamSet, tasks: &[Task], cfg: &MetaConfig, method: &dyn MetaMethod) -> Result<f64> {
    let losses = map_tasks(tasks, cfg.parallel, |t| {
        let g = Graph::new();
        let vars = params.bind(&g);
        Ok(g.scalar(task_objective(&g, &vars, t, cfg, method)?.meta_loss))
    })?;
    Ok(losses.into_iter().sum())
}

/// Sum of adapted meta-learner query losses.
pub fn maml_outer_loss(params: &ParamSet, tasks: &[Task], cfg: &MetaConfig) -> Result<f64> {
    outer_loss(params, tasks, cfg, &crate::method::Maml)
}

/// Sum of adapted meta-learner losses plus `gamma` times the co-learner
/// losses on adapted features and unadapted co-learner.
pub fn cml_outer_loss(params: &ParamSet, tasks: &[Task], cfg: &MetaConfig) -> Result<f64> {
    outer_loss(params, tasks, cfg, &crate::method::Cooperative)
}

/// As [`cml_outer_loss`], with the co-learner adapted in the inner loop.
pub fn cl_outer_loss(params: &ParamSet, tasks: &[Task], cfg: &MetaConfig) -> Result<f64> {
    outer_loss(params, tasks, cfg, &crate::method::Collaborative)
}

/// Same value as [`cml_outer_loss`]; the difference is in which gradients
/// the trainer keeps.
pub fn noise_outer_loss(params: &ParamSet, tasks: &[Task], cfg: &MetaConfig) -> Result<f64> {
    outer_loss(params, tasks, cfg, &crate::method::RandomNoise)
}

/// Outcome of one outer iteration.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// 1-based index of the completed outer update.
    pub iteration: u64,
    pub loss_sum: f64,
    pub meta_loss_sum: f64,
    pub co_loss_sum: f64,
    pub tasks: usize,
    pub freeze_violations: usize,
    pub grad_report: Option<GradReport>,
}

/// Meta-training state: current meta-initialization plus optimizer state.
#[derive(Debug)]
pub struct MetaTrainer {
    cfg: MetaConfig,
    method: Arc<dyn MetaMethod>,
    optimizer: Arc<dyn OuterOptimizer>,
    params: ParamSet,
    state: OptState,
    iteration: u64,
}

impl MetaTrainer {
    /// Resolves the method and optimizer from the built-in registries.
    pub fn new(cfg: MetaConfig, params: ParamSet) -> Result<Self> {
        let method = MethodRegistry::default().get(&cfg.method)?;
        let optimizer = OptimizerRegistry::default().build(&cfg.optimizer)?;
        Self::with_parts(cfg, method, optimizer, params)
    }

    pub fn with_parts(
        cfg: MetaConfig,
        method: Arc<dyn MetaMethod>,
        optimizer: Arc<dyn OuterOptimizer>,
        params: ParamSet,
    ) -> Result<Self> {
        cfg.validate()?;
        if method.outer_co_weight(cfg.gamma).is_some() && params.layout().co_layers().is_empty() {
            return Err(CoreError::MissingParam("co.0.w".into()));
        }
        let state = optimizer.init_state(&params);
        Ok(Self {
            cfg,
            method,
            optimizer,
            params,
            state,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn config(&self) -> &MetaConfig {
        &self.cfg
    }

    pub fn method(&self) -> &dyn MetaMethod {
        self.method.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One outer update on `tasks`. Any failure, including a non-finite loss
    /// or gradient, is reported as divergence at this iteration.
    pub fn step(&mut self, tasks: &[Task], diagnostics: bool) -> Result<StepReport> {
        let iteration = self.iteration + 1;
        let diverged = |e: CoreError| match e {
            CoreError::Divergence { .. } => e,
            other => CoreError::Divergence {
                iteration,
                detail: other.to_string(),
            },
        };
        let batch =
            batch_gradient(&self.params, tasks, &self.cfg, self.method.as_ref(), diagnostics).map_err(diverged)?;
        if !batch.loss_sum.is_finite() {
            return Err(diverged(CoreError::InvalidConfig(format!(
                "outer loss is {}",
                batch.loss_sum
            ))));
        }
        let next = self
            .optimizer
            .step(&self.params, &batch.grads, &mut self.state, self.cfg.outer_lr)
            .map_err(diverged)?;
        if next.values().iter().any(|t| !t.is_finite()) {
            return Err(diverged(CoreError::InvalidConfig(
                "non-finite parameters after the outer update".into(),
            )));
        }
        self.params = next;
        self.iteration = iteration;
        Ok(StepReport {
            iteration,
            loss_sum: batch.loss_sum,
            meta_loss_sum: batch.meta_loss_sum,
            co_loss_sum: batch.co_loss_sum,
            tasks: tasks.len(),
            freeze_violations: batch.freeze_violations,
            grad_report: batch.report.map(|r| GradReport { iteration, ..r }),
        })
    }
}

/// Runs `iterations` outer updates on the training stream of `family`,
/// calling `on_step` after each.
pub fn meta_train<F>(
    trainer: &mut MetaTrainer,
    family: &dyn TaskFamily,
    seed: u64,
    iterations: u64,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&MetaTrainer, &StepReport) -> Result<()>,
{
    for _ in 0..iterations {
        let tasks = train_batch(family, seed, trainer.iteration(), trainer.config().task_batch)?;
        let report = trainer.step(&tasks, false)?;
        on_step(trainer, &report)?;
    }
    Ok(())
}

/// Meta-test protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestMode {
    /// Adapt extractor and meta head; predict with the meta head.
    Cml,
    /// Adapt the extractor through the fixed co-learner; predict with it.
    CmlDagger,
}

impl TestMode {
    pub fn name(self) -> &'static str {
        match self {
            TestMode::Cml => "cml",
            TestMode::CmlDagger => "cml_dagger",
        }
    }
}

/// Per-task query metrics after adaptation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TestReport {
    pub losses: Vec<f64>,
    /// Query accuracy, for classification tasks.
    pub accuracies: Option<Vec<f64>>,
    /// Co-learner forward passes performed, summed over tasks.
    pub forward_co_evals: u64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

impl TestReport {
    pub fn mean_loss(&self) -> f64 {
        mean(&self.losses)
    }

    pub fn std_loss(&self) -> f64 {
        std_dev(&self.losses)
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        self.accuracies.as_deref().map(mean)
    }

    pub fn std_accuracy(&self) -> Option<f64> {
        self.accuracies.as_deref().map(std_dev)
    }
}

struct TaskResult {
    loss: f64,
    accuracy: Option<f64>,
    forward_co: u64,
}

fn test_task(params: &ParamSet, task: &Task, mode: TestMode, cfg: &MetaConfig) -> Result<TaskResult> {
    let g = Graph::new();
    let vars = params.bind(&g);
    let out = match mode {
        TestMode::Cml => {
            let adapted = adapt(
                &g,
                &vars,
                &task.support,
                InnerObjective::Meta,
                &[Partition::FeatureExtractor, Partition::MetaHead],
                cfg.inner_steps,
                cfg.inner_lr,
                false,
            )?;
            g.freeze();
            let x = g.input(task.query.inputs.clone());
            forward_meta(&g, &adapted, x)?.1
        }
        TestMode::CmlDagger => {
            let adapted = adapt(
                &g,
                &vars,
                &task.support,
                InnerObjective::Co,
                &[Partition::FeatureExtractor],
                cfg.inner_steps,
                cfg.inner_lr,
                false,
            )?;
            g.freeze();
            let x = g.input(task.query.inputs.clone());
            let features = forward_features(&g, &adapted, x)?;
            forward_co(&g, &adapted, features)?
        }
    };
    let loss = task_loss(&g, out, &task.query.targets)?;
    let accuracy = match &task.query.targets {
        Targets::Classes(labels) => Some(accuracy(&g.value(out), labels)),
        Targets::Regression(_) => None,
    };
    Ok(TaskResult {
        loss: g.scalar(loss),
        accuracy,
        forward_co: g.counter("forward_co"),
    })
}

/// Adapts on each task's support set under `mode` and scores the query set.
pub fn meta_test(params: &ParamSet, tasks: &[Task], mode: TestMode, cfg: &MetaConfig) -> Result<TestReport> {
    let layout = params.layout();
    match mode {
        TestMode::Cml if layout.head().is_none() => return Err(CoreError::MissingParam("head.w".into())),
        TestMode::CmlDagger if layout.co_layers().is_empty() => return Err(CoreError::MissingParam("co.0.w".into())),
        _ => {}
    }
    let results = map_tasks(tasks, cfg.parallel, |t| test_task(params, t, mode, cfg))?;
    let classification = results.first().is_some_and(|r| r.accuracy.is_some());
    Ok(TestReport {
        losses: results.iter().map(|r| r.loss).collect(),
        accuracies: classification.then(|| results.iter().filter_map(|r| r.accuracy).collect()),
        forward_co_evals: results.iter().map(|r| r.forward_co).sum(),
    })
}
