//! Executable correctness checks: finite-difference oracles for the
//! autodiff engine and the bilevel meta-gradient, the co-learner freeze and
//! gamma-collapse invariants, the augmented-gradient descent identity and
//! the diagnostics properties.

use std::sync::Arc;

use metacoop_autodiff::gradcheck::{
    central_difference, check_op, check_op_second_order, max_relative_error, relative_error,
};
use metacoop_autodiff::{AutodiffError, Graph, OpKind, Tensor};

use crate::config::{MetaConfig, OptimizerConfig};
use crate::diagnostics::{cosine_similarity, default_alpha_grid, descent_check, linear_cka};
use crate::engine::{batch_gradient, meta_loss_sum, outer_loss, MetaTrainer};
use crate::error::Result;
use crate::method::{Collaborative, Cooperative, Maml, MetaMethod, RandomNoise};
use crate::nn::{init_params, MlpSpec, ParamSet, Partition};
use crate::rng::{Stream, TaskRng};
use crate::tasks::{sample_sine_task, train_batch, SineFamily};

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

/// Seed and sizes for the checks.
#[derive(Clone, Copy, Debug)]
pub struct SelftestOptions {
    pub seed: u64,
    pub autodiff_cases: usize,
    pub freeze_iterations: u64,
    pub collapse_steps: u64,
    pub descent_batches: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            autodiff_cases: 100,
            freeze_iterations: 300,
            collapse_steps: 100,
            descent_batches: 50,
        }
    }
}

/// Runs every check in order.
pub fn run_all(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    vec![
        meta_gradient_oracle(opts.seed),
        autodiff_oracle(opts.seed, opts.autodiff_cases),
        freeze_invariant(opts.seed, opts.freeze_iterations),
        gamma_collapse(opts.seed, opts.collapse_steps),
        descent_identity(opts.seed, opts.descent_batches),
        diagnostics_properties(opts.seed),
    ]
}

fn to_autodiff(e: crate::error::CoreError) -> AutodiffError {
    AutodiffError::InvalidTensor(e.to_string())
}

/// 1 -> 3 feature extractor, 3 -> 1 meta head and a 3 -> 1 -> 1
/// co-learner: 16 parameters, biases drawn away from zero.
pub fn tiny_model(seed: u64) -> Result<ParamSet> {
    let spec = MlpSpec {
        input_dim: 1,
        hidden_dims: vec![3],
        output_dim: 1,
        co_hidden_dims: vec![1],
        activation: Default::default(),
    };
    let p = init_params(&spec, seed)?;
    let mut rng = TaskRng::new(seed).substream(Stream::Other(1), 0);
    let values = p
        .iter()
        .map(|(info, t)| {
            if info.name.ends_with(".b") {
                let data = (0..t.numel()).map(|_| rng.uniform(0.1, 0.5)).collect();
                Tensor::new(t.shape().to_vec(), data).expect("bias shape")
            } else {
                t.clone()
            }
        })
        .collect();
    p.with_values(values)
}

/// Second-order meta-gradient of each method's summed outer loss against
/// central differences of the whole bilevel objective.
pub fn meta_gradient_oracle(seed: u64) -> CheckOutcome {
    const STEP: f64 = 1e-4;
    const TOL: f64 = 1e-3;
    let run = || -> Result<(bool, String)> {
        let params = tiny_model(seed)?;
        let mut rng = TaskRng::new(seed).substream(Stream::Other(2), 0);
        let tasks = (0..2)
            .map(|_| sample_sine_task(&mut rng, 3, 4))
            .collect::<Result<Vec<_>>>()?;
        let base = MetaConfig {
            inner_lr: 0.01,
            inner_steps: 1,
            second_order: true,
            parallel: false,
            ..MetaConfig::default()
        };
        let cases: Vec<(&str, Arc<dyn MetaMethod>, f64)> = vec![
            ("maml", Arc::new(Maml), 0.2),
            ("cml g=0.2", Arc::new(Cooperative), 0.2),
            ("cml g=1.0", Arc::new(Cooperative), 1.0),
            ("cl", Arc::new(Collaborative), 0.2),
            ("noise", Arc::new(RandomNoise), 0.2),
        ];
        let mut worst = 0.0f64;
        let mut parts = Vec::new();
        for (label, method, gamma) in cases {
            let cfg = MetaConfig { gamma, ..base.clone() };
            let analytic = batch_gradient(&params, &tasks, &cfg, method.as_ref(), false)?.grads;
            let mut numeric = central_difference(
                |xs| {
                    let p = params.with_values(xs.to_vec()).map_err(to_autodiff)?;
                    outer_loss(&p, &tasks, &cfg, method.as_ref()).map_err(to_autodiff)
                },
                params.values(),
                STEP,
            )?;
            // Discarded partitions are compared as zero on both sides.
            for &p in method.frozen_partitions() {
                for i in params.layout().indices(p) {
                    numeric[i] = Tensor::zeros_like(&numeric[i]);
                }
            }
            let err = max_relative_error(&analytic, &numeric);
            worst = worst.max(err);
            parts.push(format!("{label}: {err:.2e}"));
        }
        Ok((
            worst < TOL,
            format!("{} params; {}; tol {TOL:.0e}", params.count(None), parts.join(", ")),
        ))
    };
    CheckOutcome::from_result("meta-gradient oracle", run())
}

fn random_tensor(rng: &mut TaskRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect()).expect("consistent shape")
}

fn op_instance(kind: &OpKind, rng: &mut TaskRng) -> (Vec<Tensor>, Vec<usize>) {
    let mut dim = || 1 + (rng.uniform(0.0, 3.999) as usize);
    let (n, m, k) = (dim(), dim(), dim());
    let mut t = |shape: &[usize]| random_tensor(rng, shape);
    match kind {
        OpKind::MatMul => (vec![t(&[n, k]), t(&[k, m])], vec![n, m]),
        OpKind::Transpose => (vec![t(&[n, m])], vec![m, n]),
        OpKind::Add | OpKind::Sub | OpKind::Mul => (vec![t(&[n, m]), t(&[n, m])], vec![n, m]),
        OpKind::Scale(_) | OpKind::Square | OpKind::Softmax => (vec![t(&[n, m])], vec![n, m]),
        OpKind::Relu => {
            let x = t(&[n, m]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            (vec![x], vec![n, m])
        }
        OpKind::AddBias => (vec![t(&[n, m]), t(&[m])], vec![n, m]),
        OpKind::SumRows => (vec![t(&[n, m])], vec![m]),
        OpKind::BroadcastRows(rows) => (vec![t(&[m])], vec![*rows, m]),
        OpKind::Sum | OpKind::Mean => (vec![t(&[n, m])], vec![]),
        OpKind::Fill(shape) => (vec![t(&[])], shape.clone()),
        OpKind::SoftmaxCrossEntropy(labels) => (vec![t(&[labels.len(), 3])], vec![]),
        OpKind::RowSum => (vec![t(&[n, m])], vec![n]),
        OpKind::BroadcastCols(c) => (vec![t(&[n])], vec![n, *c]),
        OpKind::ConcatRows => (vec![t(&[n, m]), t(&[k, m])], vec![n + k, m]),
        OpKind::SliceRows { start, len } => (vec![t(&[start + len + 1, m])], vec![*len, m]),
        OpKind::PadRows { start, total } => (vec![t(&[total - start, m])], vec![*total, m]),
    }
}

fn op_kinds() -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale(-1.7),
        OpKind::AddBias,
        OpKind::SumRows,
        OpKind::BroadcastRows(3),
        OpKind::Relu,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Fill(vec![2, 3]),
        OpKind::Softmax,
        OpKind::SoftmaxCrossEntropy(Arc::from(vec![0usize, 2, 1, 2])),
        OpKind::RowSum,
        OpKind::BroadcastCols(3),
        OpKind::ConcatRows,
        OpKind::SliceRows { start: 1, len: 2 },
        OpKind::PadRows { start: 1, total: 4 },
    ]
}

/// Exact second derivatives of small closed-form functions.
fn analytic_second_order() -> Result<f64> {
    let mut worst = 0.0f64;
    // d2/dx2 x^4 = 12 x^2
    for x in [-1.7, 0.4, 1.0, 2.5] {
        let g = Graph::new();
        let xv = g.input(Tensor::scalar(x));
        let x4 = g.square(g.square(xv)?)?;
        let d1 = g.gradient_graph(x4, &[xv])?;
        let d2 = g.gradient(d1[0], &[xv])?;
        worst = worst.max(relative_error(d2[0].data()[0], 12.0 * x * x));
    }
    // d2/dx dy (x y)^2 = 4 x y
    let (x, y) = (0.7, -1.3);
    let g = Graph::new();
    let xv = g.input(Tensor::scalar(x));
    let yv = g.input(Tensor::scalar(y));
    let f = g.square(g.mul(xv, yv)?)?;
    let dx = g.gradient_graph(f, &[xv])?;
    let dxy = g.gradient(dx[0], &[yv])?;
    worst = worst.max(relative_error(dxy[0].data()[0], 4.0 * x * y));
    // Hessian-vector product of mean((X w - y)^2) is 2 X^T X u / n.
    let xm = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.3, 2.0, -1.0])?;
    let target = Tensor::matrix(3, 1, vec![0.2, -0.4, 1.1])?;
    let w0 = Tensor::matrix(2, 1, vec![0.3, -0.8])?;
    let u = Tensor::matrix(2, 1, vec![1.5, 0.25])?;
    let g = Graph::new();
    let (xv, tv, wv, uv) = (g.input(xm.clone()), g.input(target), g.input(w0), g.input(u.clone()));
    let loss = g.mse(g.matmul(xv, wv)?, tv)?;
    let grad = g.gradient_graph(loss, &[wv])?[0];
    let hvp = g.gradient(g.sum(g.mul(grad, uv)?)?, &[wv])?;
    let expected = xm.transpose()?.matmul(&xm.matmul(&u)?)?.map(|v| 2.0 * v / 3.0);
    worst = worst.max(max_relative_error(&hvp, &[expected]));
    Ok(worst)
}

/// Every op's first- and second-order rules against central differences on
/// `cases` random shapes and inputs per op, plus closed-form double
/// derivatives.
pub fn autodiff_oracle(seed: u64, cases: usize) -> CheckOutcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const EXACT_TOL: f64 = 1e-6;
    let run = || -> Result<(bool, String)> {
        let mut worst_first = 0.0f64;
        let mut worst_second = 0.0f64;
        let mut worst_op = "";
        let kinds = op_kinds();
        for (k, kind) in kinds.iter().enumerate() {
            let mut rng = TaskRng::new(seed).substream(Stream::Other(3), k as u64);
            for _ in 0..cases {
                let (inputs, out_shape) = op_instance(kind, &mut rng);
                let weights = random_tensor(&mut rng, &out_shape);
                let first = check_op(kind, &inputs, &weights, STEP)?;
                let dirs: Vec<Tensor> = inputs.iter().map(|t| random_tensor(&mut rng, t.shape())).collect();
                let second = check_op_second_order(kind, &inputs, &weights, &dirs, STEP)?;
                if first.max_rel_error.max(second.max_rel_error) > worst_first.max(worst_second) {
                    worst_op = first.op;
                }
                worst_first = worst_first.max(first.max_rel_error);
                worst_second = worst_second.max(second.max_rel_error);
            }
        }
        let exact = analytic_second_order()?;
        Ok((
            worst_first < TOL && worst_second < TOL && exact < EXACT_TOL,
            format!(
                "{} ops x {cases} cases; first {worst_first:.2e}, second {worst_second:.2e} (worst {worst_op}), closed-form {exact:.2e}",
                kinds.len()
            ),
        ))
    };
    CheckOutcome::from_result("autodiff oracle", run())
}

fn sine_family() -> SineFamily {
    SineFamily {
        k_shot: 5,
        query_size: 50,
        test_grid: 100,
    }
}

fn sine_config(method: &str, gamma: f64, seed: u64) -> MetaConfig {
    MetaConfig {
        method: method.into(),
        gamma,
        seed,
        optimizer: OptimizerConfig::default(),
        ..MetaConfig::default()
    }
}

/// Co-learner values seen by every inner loop of a CML run stay bitwise
/// equal to the meta-level values, and the outer loop does move them.
pub fn freeze_invariant(seed: u64, iterations: u64) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let family = sine_family();
        let cfg = sine_config("cml", 0.2, seed);
        let params = init_params(&MlpSpec::sinusoid(), seed)?;
        let start = params.checksum(Partition::CoHead);
        let mut trainer = MetaTrainer::new(cfg.clone(), params)?;
        let mut violations = 0;
        for it in 0..iterations {
            let tasks = train_batch(&family, seed, it, cfg.task_batch)?;
            violations += trainer.step(&tasks, false)?.freeze_violations;
        }
        let moved = trainer.params().checksum(Partition::CoHead) != start;
        Ok((
            violations == 0 && moved,
            format!("{iterations} iterations, {violations} inner-loop violations, outer loop moved phi: {moved}"),
        ))
    };
    CheckOutcome::from_result("freeze invariant", run())
}

fn max_param_rel_diff(a: &ParamSet, b: &ParamSet, partitions: &[Partition]) -> f64 {
    let mut worst = 0.0f64;
    for &p in partitions {
        for i in a.layout().indices(p) {
            for (&x, &y) in a.values()[i].data().iter().zip(b.values()[i].data()) {
                let d = (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
                worst = worst.max(if x == y { 0.0 } else { d });
            }
        }
    }
    worst
}

/// CML with `gamma = 0` follows MAML's extractor and meta-head trajectory.
pub fn gamma_collapse(seed: u64, steps: u64) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let family = sine_family();
        let params = init_params(&MlpSpec::sinusoid(), seed)?;
        let mut cml = MetaTrainer::new(sine_config("cml", 0.0, seed), params.clone())?;
        let mut maml = MetaTrainer::new(sine_config("maml", 0.0, seed), params)?;
        let mut worst = 0.0f64;
        for it in 0..steps {
            let tasks = train_batch(&family, seed, it, 4)?;
            cml.step(&tasks, false)?;
            maml.step(&tasks, false)?;
            worst = worst.max(max_param_rel_diff(
                cml.params(),
                maml.params(),
                &[Partition::FeatureExtractor, Partition::MetaHead],
            ));
        }
        Ok((
            worst < 1e-12,
            format!("{steps} steps, max relative difference {worst:.2e}"),
        ))
    };
    CheckOutcome::from_result("gamma collapse", run())
}

/// On fixed CML batches, `<G, Ĝ> = |G|^2 + sum_j <g_j, ḡ_j>`, and a grid
/// step along `-Ĝ` lowers the loss whenever every layer product is
/// positive.
pub fn descent_identity(seed: u64, batches: usize) -> CheckOutcome {
    const TOL: f64 = 1e-10;
    let run = || -> Result<(bool, String)> {
        let family = sine_family();
        let cfg = sine_config("cml", 0.2, seed);
        let method = Cooperative;
        let mut trainer = MetaTrainer::new(cfg.clone(), init_params(&MlpSpec::sinusoid(), seed)?)?;
        let grid = default_alpha_grid();
        let (mut worst, mut positive, mut found, mut descent) = (0.0f64, 0, 0, 0);
        for it in 0..batches as u64 {
            let tasks = train_batch(&family, seed, it, cfg.task_batch)?;
            let params = trainer.params().clone();
            let report = batch_gradient(&params, &tasks, &cfg, &method, true)?
                .report
                .expect("diagnostics requested");
            let check = descent_check(&report, &params, |p| meta_loss_sum(p, &tasks, &cfg, &method), &grid)?;
            worst = worst.max(check.identity_error());
            descent += usize::from(check.is_descent);
            if check.all_layers_positive {
                positive += 1;
                found += usize::from(check.alpha.is_some());
            }
            trainer.step(&tasks, false)?;
        }
        Ok((
            worst < TOL && found == positive,
            format!(
                "{batches} batches, identity error {worst:.2e}; {descent} descent directions; \
                 {positive} all-positive batches, decrease found for {found}"
            ),
        ))
    };
    CheckOutcome::from_result("descent identity", run())
}

/// Brute-force linear CKA through centred Gram matrices:
/// `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))` with `HSIC = tr(K H L H)`.
pub fn hsic_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let n = x.shape()[0];
    let k = x.matmul(&x.transpose()?)?;
    let l = y.matmul(&y.transpose()?)?;
    let mut h = Tensor::filled(vec![n, n], -1.0 / n as f64);
    for i in 0..n {
        h.data_mut()[i * n + i] += 1.0;
    }
    let hsic = |a: &Tensor, b: &Tensor| -> Result<f64> {
        let m = a.matmul(&h)?.matmul(b)?.matmul(&h)?;
        Ok((0..n).map(|i| m.data()[i * n + i]).sum())
    };
    Ok(hsic(&k, &l)? / (hsic(&k, &k)? * hsic(&l, &l)?).sqrt())
}

/// Random orthogonal matrix by Gram-Schmidt.
fn random_orthogonal(rng: &mut TaskRng, n: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let data = (0..n * n).map(|k| cols[k % n][k / n]).collect();
    Tensor::matrix(n, n, data).expect("square")
}

/// CKA identity, invariances and agreement with [`hsic_cka`]; cosine
/// similarity trivial cases.
pub fn diagnostics_properties(seed: u64) -> CheckOutcome {
    const TOL: f64 = 1e-10;
    let run = || -> Result<(bool, String)> {
        let mut rng = TaskRng::new(seed).substream(Stream::Other(4), 0);
        let (mut self_err, mut inv_err, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..20 {
            let x = random_tensor(&mut rng, &[8, 3]);
            let y = random_tensor(&mut rng, &[8, 5]);
            self_err = self_err.max((linear_cka(&x, &x)?.value - 1.0).abs());
            let base = linear_cka(&x, &y)?.value;
            let q = random_orthogonal(&mut rng, 5);
            let c = rng.uniform(0.1, 10.0) * if rng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            inv_err = inv_err
                .max((linear_cka(&x, &y.matmul(&q)?)?.value - base).abs())
                .max((linear_cka(&x.map(|v| c * v), &y)?.value - base).abs())
                .max((linear_cka(&x, &x.matmul(&random_orthogonal(&mut rng, 3))?)?.value - 1.0).abs());
            oracle_err = oracle_err.max((base - hsic_cka(&x, &y)?).abs());
        }
        let v = [0.5, -2.0, 3.25];
        let neg: Vec<f64> = v.iter().map(|a| -a).collect();
        let cosine_exact = cosine_similarity(&v, &v)?.value == 1.0
            && cosine_similarity(&v, &neg)?.value == -1.0
            && cosine_similarity(&[1.0, 0.0], &[0.0, 1.0])?.value == 0.0;
        Ok((
            self_err < TOL && inv_err < TOL && oracle_err < TOL && cosine_exact,
            format!(
                "CKA self {self_err:.1e}, invariance {inv_err:.1e}, HSIC oracle {oracle_err:.1e} (20 pairs); cosine exact: {cosine_exact}"
            ),
        ))
    };
    CheckOutcome::from_result("diagnostics properties", run())
}
