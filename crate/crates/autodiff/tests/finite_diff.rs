use std::sync::Arc;

use metacoop_autodiff::gradcheck::{
    central_difference, check_op, check_op_second_order, max_relative_error, relative_error,
};
use metacoop_autodiff::{Graph, OpKind, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

/// Inputs and output shape for one randomly sized instance of `kind`.
fn instance(kind: &OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>) {
    let n = rng.random_range(1..5);
    let m = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    match kind {
        OpKind::MatMul => (vec![random(rng, &[n, k]), random(rng, &[k, m])], vec![n, m]),
        OpKind::Transpose => (vec![random(rng, &[n, m])], vec![m, n]),
        OpKind::Add | OpKind::Sub | OpKind::Mul => (vec![random(rng, &[n, m]), random(rng, &[n, m])], vec![n, m]),
        OpKind::Scale(_) | OpKind::Square | OpKind::Softmax => (vec![random(rng, &[n, m])], vec![n, m]),
        OpKind::Relu => (vec![away_from_zero(rng, &[n, m])], vec![n, m]),
        OpKind::AddBias => (vec![random(rng, &[n, m]), random(rng, &[m])], vec![n, m]),
        OpKind::SumRows => (vec![random(rng, &[n, m])], vec![m]),
        OpKind::BroadcastRows(rows) => (vec![random(rng, &[m])], vec![*rows, m]),
        OpKind::Sum | OpKind::Mean => (vec![random(rng, &[n, m])], vec![]),
        OpKind::Fill(shape) => (vec![random(rng, &[])], shape.clone()),
        OpKind::SoftmaxCrossEntropy(labels) => (vec![random(rng, &[labels.len(), 3])], vec![]),
        OpKind::RowSum => (vec![random(rng, &[n, m])], vec![n]),
        OpKind::BroadcastCols(c) => (vec![random(rng, &[n])], vec![n, *c]),
        OpKind::ConcatRows => (vec![random(rng, &[n, m]), random(rng, &[k, m])], vec![n + k, m]),
        OpKind::SliceRows { start, len } => (vec![random(rng, &[start + len + 1, m])], vec![*len, m]),
        OpKind::PadRows { start, total } => (vec![random(rng, &[total - start, m])], vec![*total, m]),
    }
}

fn all_kinds() -> Vec<OpKind> {
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>(), which in 0usize..21) {
        let kind = &all_kinds()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, out_shape) = instance(kind, &mut rng);
        let weights = random(&mut rng, &out_shape);
        let check = check_op(kind, &inputs, &weights, STEP).unwrap();
        prop_assert!(check.max_rel_error < TOL, "{:?}", check);

        let dirs: Vec<Tensor> = inputs.iter().map(|t| random(&mut rng, t.shape())).collect();
        let check = check_op_second_order(kind, &inputs, &weights, &dirs, STEP).unwrap();
        prop_assert!(check.max_rel_error < TOL, "second order {:?}", check);
    }

    #[test]
    fn fourth_power_second_derivative(x in 0.5f64..2.0) {
        let g = Graph::new();
        let xv = g.input(Tensor::scalar(x));
        let x2 = g.square(xv).unwrap();
        let x4 = g.square(x2).unwrap();
        let d1 = g.gradient_graph(x4, &[xv]).unwrap();
        let d2 = g.gradient(d1[0], &[xv]).unwrap();
        prop_assert!(relative_error(d2[0].item().unwrap(), 12.0 * x * x) < 1e-6);
    }
}

#[test]
fn small_mlp_gradient_matches_finite_differences() {
    // 2 -> 1 -> 1 with biases: five parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[6, 2]);
    let y = random(&mut rng, &[6, 1]);
    let params = vec![
        away_from_zero(&mut rng, &[2, 1]),
        Tensor::vector(vec![0.3]),
        away_from_zero(&mut rng, &[1, 1]),
        Tensor::vector(vec![-0.2]),
    ];
    assert_eq!(params.iter().map(Tensor::numel).sum::<usize>(), 5);

    let loss_of = |g: &Graph, p: &[metacoop_autodiff::Var]| {
        let xv = g.input(x.clone());
        let yv = g.input(y.clone());
        let h = g.relu(g.add_bias(g.matmul(xv, p[0])?, p[1])?)?;
        let out = g.add_bias(g.matmul(h, p[2])?, p[3])?;
        g.mse(out, yv)
    };

    let g = Graph::new();
    let vars: Vec<_> = params.iter().map(|t| g.input(t.clone())).collect();
    let loss = loss_of(&g, &vars).unwrap();
    let analytic = g.gradient(loss, &vars).unwrap();
    let numeric = central_difference(
        |ps| {
            let g = Graph::new();
            let vars: Vec<_> = ps.iter().map(|t| g.input(t.clone())).collect();
            Ok(g.scalar(loss_of(&g, &vars)?))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(&analytic, &numeric) < 1e-4);
}

#[test]
fn gradient_through_detached_step_is_first_order() {
    // w' = w - a * d/dw (w x - y)^2, loss (w' x - y)^2.
    let (w0, x, y, a) = (0.7, 1.3, 0.4, 0.05);
    let g = Graph::new();
    let w = g.input(Tensor::scalar(w0));
    let xv = g.input(Tensor::scalar(x));
    let yv = g.input(Tensor::scalar(y));
    let inner = g.square(g.sub(g.mul(w, xv).unwrap(), yv).unwrap()).unwrap();
    let grad = g.gradient_graph(inner, &[w]).unwrap()[0];
    let step = g.scale(g.detach(grad), a).unwrap();
    let adapted = g.sub(w, step).unwrap();
    let outer = g.square(g.sub(g.mul(adapted, xv).unwrap(), yv).unwrap()).unwrap();
    let got = g.gradient(outer, &[w]).unwrap()[0].item().unwrap();

    let w1 = w0 - a * 2.0 * (w0 * x - y) * x;
    let first_order = 2.0 * (w1 * x - y) * x;
    assert!(relative_error(got, first_order) < 1e-14);

    // Without detaching, the chain rule picks up (1 - 2 a x^2).
    let step = g.scale(grad, a).unwrap();
    let adapted = g.sub(w, step).unwrap();
    let outer = g.square(g.sub(g.mul(adapted, xv).unwrap(), yv).unwrap()).unwrap();
    let got = g.gradient(outer, &[w]).unwrap()[0].item().unwrap();
    assert!(relative_error(got, first_order * (1.0 - 2.0 * a * x * x)) < 1e-12);
}
