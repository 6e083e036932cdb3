//! Central finite-difference oracles for checking gradients.
//!
//! The finite-difference side only ever calls forward kernels, so it stays
//! independent of the backward rules it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::{self, OpKind};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Largest elementwise [`relative_error`] between two tensor lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element
/// of every input.
pub fn central_difference<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros_like(&inputs[k]);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Outcome of checking one op at one input point.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
}

/// Weighted scalar projection `sum(weights * op(inputs))`, evaluated with
/// forward kernels only.
fn projected(kind: &OpKind, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = kernels::forward(kind, &refs)?;
    out.dot(weights)
}

fn record_projection(g: &Graph, kind: &OpKind, vars: &[Var], weights: &Tensor) -> Result<Var> {
    let out = g.apply(kind.clone(), vars)?;
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Compares the reverse-mode gradient of `sum(weights * op(inputs))` against
/// central differences with the given step. `weights` must have the op's
/// output shape.
pub fn check_op(kind: &OpKind, inputs: &[Tensor], weights: &Tensor, step: f64) -> Result<OpCheck> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = record_projection(&g, kind, &vars, weights)?;
    let analytic = g.gradient(loss, &vars)?;
    let numeric = central_difference(|xs| projected(kind, xs, weights), inputs, step)?;
    Ok(OpCheck {
        op: kind.name(),
        max_rel_error: max_relative_error(&analytic, &numeric),
    })
}

/// Checks the recorded backward rules of an op by comparing a
/// Hessian-vector product `d/dx <grad L(x), u>` against central differences
/// of the (numerically evaluated) gradient.
pub fn check_op_second_order(
    kind: &OpKind,
    inputs: &[Tensor],
    weights: &Tensor,
    directions: &[Tensor],
    step: f64,
) -> Result<OpCheck> {
    // Square the projection so even linear ops have a nonzero Hessian.
    let squared_loss = |g: &Graph, vars: &[Var]| -> Result<Var> {
        let p = record_projection(g, kind, vars, weights)?;
        g.square(p)
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = squared_loss(&g, &vars)?;
    let grads = g.gradient_graph(loss, &vars)?;
    let mut inner = None;
    for (gv, u) in grads.iter().zip(directions) {
        let uv = g.input(u.clone());
        let term = g.sum(g.mul(*gv, uv)?)?;
        inner = Some(match inner {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let inner = inner.expect("at least one input");
    let analytic = g.gradient(inner, &vars)?;

    let directional = |xs: &[Tensor]| -> Result<f64> {
        let p = projected(kind, xs, weights)?;
        // <d(p^2)/dx, u> = 2 p <dp/dx, u>, using the first-order reverse
        // gradient (covered by `check_op`) to avoid nested differencing.
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let proj = record_projection(&g, kind, &vars, weights)?;
        let dp = g.gradient(proj, &vars)?;
        let mut acc = 0.0;
        for (d, u) in dp.iter().zip(directions) {
            acc += 2.0 * p * d.dot(u)?;
        }
        Ok(acc)
    };
    let numeric = central_difference(directional, inputs, step)?;
    Ok(OpCheck {
        op: kind.name(),
        max_rel_error: max_relative_error(&analytic, &numeric),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_quadratic() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let g = central_difference(|xs| Ok(xs[0].data().iter().map(|v| v * v).sum()), &[x], 1e-5).unwrap();
        assert!((g[0].data()[0] - 2.0).abs() < 1e-8);
        assert!((g[0].data()[1] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn matmul_check_passes() {
        let a = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.6]).unwrap();
        let b = Tensor::matrix(3, 2, vec![0.7, -0.4, 1.1, 0.2, -0.9, 0.5]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let c = check_op(&OpKind::MatMul, &[a.clone(), b.clone()], &w, 1e-5).unwrap();
        assert!(c.max_rel_error < 1e-6, "{c:?}");
        let u = vec![Tensor::filled(vec![2, 3], 0.5), Tensor::filled(vec![3, 2], -0.3)];
        let c = check_op_second_order(&OpKind::MatMul, &[a, b], &w, &u, 1e-5).unwrap();
        assert!(c.max_rel_error < 1e-5, "{c:?}");
    }
}
