//! Gradient and representation measurements: meta-path versus co-path
//! gradient similarity, per-layer gradient norms, linear CKA and the
//! descent-direction check for the augmented gradient.

use std::sync::Arc;

use metacoop_autodiff::{Graph, Tensor};
use serde::Serialize;

use crate::config::MetaConfig;
use crate::engine::{adapt, InnerObjective};
use crate::error::{CoreError, Result};
use crate::nn::{feature_activations, forward_meta, ParamLayout, ParamSet, Partition};
use crate::tasks::Task;

/// Denominator magnitude below which a similarity is reported as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A similarity value; `degenerate` marks a zero returned because a norm
/// fell below [`DEGENERATE_NORM`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

impl Similarity {
    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// Meta-path gradient `G` and co-path gradient `Ḡ` of one batch, aligned
/// with the parameter layout.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub iteration: u64,
    pub layout: Arc<ParamLayout>,
    pub meta: Vec<Tensor>,
    pub co: Vec<Tensor>,
}

impl GradReport {
    fn feature_weights(&self) -> impl Iterator<Item = (&str, usize)> + '_ {
        self.layout
            .feature_layers()
            .iter()
            .map(|&(w, _)| (self.layout.entries()[w].name.as_str(), w))
    }
}

/// `<a, b> / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(CoreError::LengthMismatch(format!(
            "cosine similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(Similarity::degenerate());
    }
    Ok(Similarity {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// L2 norm of `G + Ḡ` for every feature-extractor weight; biases are left
/// out.
pub fn per_layer_grad_norms(report: &GradReport) -> Vec<(String, f64)> {
    report
        .feature_weights()
        .map(|(name, w)| {
            let sq: f64 = report.meta[w]
                .data()
                .iter()
                .zip(report.co[w].data())
                .map(|(a, b)| (a + b) * (a + b))
                .sum();
            (name.to_string(), sq.sqrt())
        })
        .collect()
}

/// Cosine similarity of the meta-path and co-path gradients of the last
/// feature-extractor weight.
pub fn last_layer_similarity(report: &GradReport) -> Result<Similarity> {
    let (_, w) = report
        .feature_weights()
        .last()
        .ok_or_else(|| CoreError::MissingParam("fe.0.w".into()))?;
    cosine_similarity(report.meta[w].data(), report.co[w].data())
}

/// Cosine similarity per feature-extractor weight.
pub fn layer_similarities(report: &GradReport) -> Result<Vec<(String, Similarity)>> {
    report
        .feature_weights()
        .map(|(name, w)| {
            Ok((
                name.to_string(),
                cosine_similarity(report.meta[w].data(), report.co[w].data())?,
            ))
        })
        .collect()
}

fn centered(x: &Tensor) -> Result<Tensor> {
    let (n, p) = x
        .dims2()
        .ok_or_else(|| CoreError::LengthMismatch(format!("CKA needs a matrix, got {:?}", x.shape())))?;
    let mut out = x.clone();
    for j in 0..p {
        let mean = (0..n).map(|i| x.data()[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out.data_mut()[i * p + j] -= mean;
        }
    }
    Ok(out)
}

fn gram_frobenius(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.transpose()?.matmul(b)?.l2_norm())
}

/// Linear CKA between representations `x` (`n x p`) and `y` (`n x q`) of
/// the same `n` examples.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<Similarity> {
    let (n, _) = x.dims2().unwrap_or((0, 0));
    let (m, _) = y.dims2().unwrap_or((0, 0));
    if n != m || x.rank() != 2 || y.rank() != 2 {
        return Err(CoreError::LengthMismatch(format!(
            "CKA inputs {:?} and {:?} must be matrices with equal rows",
            x.shape(),
            y.shape()
        )));
    }
    if n < 2 {
        return Err(CoreError::LengthMismatch(format!("CKA needs at least 2 rows, got {n}")));
    }
    let xc = centered(x)?;
    let yc = centered(y)?;
    let xx = gram_frobenius(&xc, &xc)?;
    let yy = gram_frobenius(&yc, &yc)?;
    if xx < DEGENERATE_NORM || yy < DEGENERATE_NORM {
        return Ok(Similarity::degenerate());
    }
    let yx = gram_frobenius(&yc, &xc)?;
    Ok(Similarity {
        value: (yx * yx / (xx * yy)).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// `count` log-spaced points from `lo` to `hi`, inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Default step grid for [`descent_check`]: `1e-6 ..= 1e-2`, nine points.
pub fn default_alpha_grid() -> Vec<f64> {
    log_grid(1e-6, 1e-2, 9)
}

/// Outcome of [`descent_check`].
#[derive(Clone, Debug, Serialize)]
pub struct DescentCheck {
    /// `<g_j, ḡ_j>` per feature-extractor layer (weight and bias together).
    pub layer_products: Vec<(String, f64)>,
    pub all_layers_positive: bool,
    /// `<G, Ĝ>` over the extractor, computed directly, with `Ĝ = G + Ḡ`.
    pub g_dot_ghat: f64,
    /// `|G|^2 + sum_j <g_j, ḡ_j>`.
    pub decomposed: f64,
    pub is_descent: bool,
    pub base_loss: f64,
    /// Smallest grid step with `L(w - a Ĝ) < L(w)`.
    pub alpha: Option<f64>,
}

impl DescentCheck {
    /// `|<G, Ĝ> - decomposed| / max(|<G, Ĝ>|, |decomposed|, 1e-300)`
    pub fn identity_error(&self) -> f64 {
        let denom = self.g_dot_ghat.abs().max(self.decomposed.abs()).max(1e-300);
        (self.g_dot_ghat - self.decomposed).abs() / denom
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks whether the augmented feature-extractor gradient `Ĝ = G + Ḡ` is a
/// descent direction for the meta-learner loss. Only the extractor is
/// displaced: with second-order adaptation the co-learner loss also reaches
/// the meta head through the adapted extractor, so `Ḡ` is not confined to
/// the extractor's layers elsewhere.
///
/// `loss` re-evaluates the same batch's meta-learner loss at displaced
/// parameters; `base` is the point the report was taken at.
pub fn descent_check<F>(report: &GradReport, base: &ParamSet, loss: F, grid: &[f64]) -> Result<DescentCheck>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if base.layout() != &report.layout {
        return Err(CoreError::LayoutMismatch("report and parameters".into()));
    }
    let layout = &report.layout;
    let idx = layout.indices(Partition::FeatureExtractor);
    let ghat: Vec<Tensor> = idx
        .iter()
        .map(|&i| {
            let mut t = report.meta[i].clone();
            for (a, b) in t.data_mut().iter_mut().zip(report.co[i].data()) {
                *a += b;
            }
            t
        })
        .collect();

    let layer_products: Vec<(String, f64)> = layout
        .feature_layers()
        .iter()
        .enumerate()
        .map(|(j, &(w, b))| {
            let p = dot(&report.meta[w], &report.co[w]) + dot(&report.meta[b], &report.co[b]);
            (format!("fe.{j}"), p)
        })
        .collect();
    let all_layers_positive = layer_products.iter().all(|(_, p)| *p > 0.0);
    let g_dot_ghat: f64 = idx.iter().zip(&ghat).map(|(&i, h)| dot(&report.meta[i], h)).sum();
    let norm_sq: f64 = idx.iter().map(|&i| report.meta[i].sum_squares()).sum();
    let decomposed = norm_sq + layer_products.iter().map(|(_, p)| p).sum::<f64>();

    let base_loss = loss(base)?;
    let mut alpha = None;
    for &a in grid {
        let mut values = base.values().to_vec();
        for (&i, h) in idx.iter().zip(&ghat) {
            for (v, d) in values[i].data_mut().iter_mut().zip(h.data()) {
                *v -= a * d;
            }
        }
        if loss(&base.with_values(values)?)? < base_loss {
            alpha = Some(a);
            break;
        }
    }
    Ok(DescentCheck {
        layer_products,
        all_layers_positive,
        g_dot_ghat,
        decomposed,
        is_descent: g_dot_ghat > 0.0,
        base_loss,
        alpha,
    })
}

/// Last-layer gradient similarity per report for a CML run and a CL run
/// recorded at the same iterations.
#[derive(Clone, Debug, Serialize)]
pub struct SimilaritySeries {
    pub iterations: Vec<u64>,
    pub cml: Vec<f64>,
    pub cl: Vec<f64>,
}

impl SimilaritySeries {
    pub fn mean_cml(&self) -> f64 {
        self.cml.iter().sum::<f64>() / self.cml.len().max(1) as f64
    }

    pub fn mean_cl(&self) -> f64 {
        self.cl.iter().sum::<f64>() / self.cl.len().max(1) as f64
    }
}

fn feature_shapes(layout: &ParamLayout) -> Vec<Vec<usize>> {
    layout
        .entries()
        .iter()
        .filter(|e| e.partition == Partition::FeatureExtractor)
        .map(|e| e.shape.clone())
        .collect()
}

pub fn collect_cml_vs_cl_similarity(cml: &[GradReport], cl: &[GradReport]) -> Result<SimilaritySeries> {
    if cml.len() != cl.len() {
        return Err(CoreError::LengthMismatch(format!(
            "{} CML reports against {} CL reports",
            cml.len(),
            cl.len()
        )));
    }
    let mut series = SimilaritySeries {
        iterations: Vec::with_capacity(cml.len()),
        cml: Vec::with_capacity(cml.len()),
        cl: Vec::with_capacity(cl.len()),
    };
    for (a, b) in cml.iter().zip(cl) {
        if feature_shapes(&a.layout) != feature_shapes(&b.layout) {
            return Err(CoreError::LayoutMismatch("feature extractors differ".into()));
        }
        if a.iteration != b.iteration {
            return Err(CoreError::LengthMismatch(format!(
                "iteration {} against {}",
                a.iteration, b.iteration
            )));
        }
        series.iterations.push(a.iteration);
        series.cml.push(last_layer_similarity(a)?.value);
        series.cl.push(last_layer_similarity(b)?.value);
    }
    Ok(series)
}

/// Linear CKA between each layer's representation of the probe queries
/// before and after one task adaptation (extractor layers, then the meta
/// head output). Rows from all probe tasks are stacked.
pub fn cka_before_after(params: &ParamSet, probes: &[Task], cfg: &MetaConfig) -> Result<Vec<(String, Similarity)>> {
    let mut before: Vec<Vec<f64>> = Vec::new();
    let mut after: Vec<Vec<f64>> = Vec::new();
    let mut widths = Vec::new();
    let mut rows = 0;
    for task in probes {
        let g = Graph::new();
        let vars = params.bind(&g);
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
        for (slot, p) in [(&mut before, &vars), (&mut after, &adapted)] {
            let mut layers = feature_activations(&g, p, x)?;
            layers.push(forward_meta(&g, p, x)?.1);
            if slot.is_empty() {
                slot.resize(layers.len(), Vec::new());
            }
            widths.clear();
            for (acc, v) in slot.iter_mut().zip(layers) {
                let t = g.value(v);
                widths.push(t.dims2().map_or(1, |(_, c)| c));
                acc.extend_from_slice(t.data());
            }
        }
        rows += task.query.inputs.shape()[0];
    }
    let names = params
        .layout()
        .feature_layers()
        .iter()
        .enumerate()
        .map(|(j, _)| format!("fe.{j}"))
        .chain(std::iter::once("head".to_string()));
    names
        .zip(before.into_iter().zip(after).zip(widths))
        .map(|(name, ((b, a), w))| {
            let b = Tensor::matrix(rows, w, b)?;
            let a = Tensor::matrix(rows, w, a)?;
            Ok((name, linear_cka(&b, &a)?))
        })
        .collect()
}
