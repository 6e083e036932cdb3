//! Reverse-mode sweep. The vector-Jacobian rules are written once against
//! [`Backend`], which either evaluates them on tensors or records them as new
//! graph nodes for higher-order differentiation.

use std::sync::Arc;

use crate::error::Result;
use crate::graph::{Graph, Op};
use crate::kernels::{self, OpKind};
use crate::tensor::Tensor;

pub(crate) trait Backend {
    type T: Clone;

    /// The forward value of node `id`.
    fn saved(&self, id: usize) -> Self::T;
    fn constant(&self, value: Tensor) -> Self::T;
    fn apply(&self, kind: OpKind, inputs: &[&Self::T]) -> Result<Self::T>;
}

pub(crate) fn backprop<B: Backend>(
    graph: &Graph,
    backend: &B,
    loss: usize,
    wrt: &[usize],
) -> Result<Vec<Option<B::T>>> {
    let Some(lowest) = wrt.iter().copied().filter(|&w| w <= loss).min() else {
        return Ok(vec![None; wrt.len()]);
    };

    // Nodes downstream of some wrt entry; adjoints only flow through these.
    let mut reach = vec![false; loss + 1];
    for &w in wrt {
        if w <= loss {
            reach[w] = true;
        }
    }
    for id in lowest..=loss {
        if reach[id] {
            continue;
        }
        let node = graph.node(id);
        if matches!(node.op, Op::Apply(_)) && node.inputs.iter().any(|&i| reach[i]) {
            reach[id] = true;
        }
    }
    if !reach[loss] {
        return Ok(vec![None; wrt.len()]);
    }

    let mut adj: Vec<Option<B::T>> = vec![None; loss + 1];
    let seed_shape = graph.node(loss).value.shape().to_vec();
    adj[loss] = Some(backend.constant(Tensor::filled(seed_shape, 1.0)));

    for id in (lowest..=loss).rev() {
        if !reach[id] {
            continue;
        }
        let Some(g) = adj[id].clone() else { continue };
        let node = graph.node(id);
        let Op::Apply(kind) = &node.op else { continue };
        let needs: Vec<bool> = node.inputs.iter().map(|&i| reach[i]).collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let contributions = vjp(graph, backend, kind, id, &node.inputs, &needs, &g)?;
        for ((&input, contribution), need) in node.inputs.iter().zip(contributions).zip(needs) {
            if !need {
                continue;
            }
            let Some(c) = contribution else { continue };
            adj[input] = Some(match adj[input].take() {
                None => c,
                Some(prev) => backend.apply(OpKind::Add, &[&prev, &c])?,
            });
        }
    }

    Ok(wrt
        .iter()
        .map(|&w| if w <= loss { adj[w].clone() } else { None })
        .collect())
}

fn vjp<B: Backend>(
    graph: &Graph,
    b: &B,
    kind: &OpKind,
    id: usize,
    inputs: &[usize],
    needs: &[bool],
    g: &B::T,
) -> Result<Vec<Option<B::T>>> {
    let value = |i: usize| -> Arc<Tensor> { graph.node(inputs[i]).value };
    let rows = |i: usize| value(i).shape().first().copied().unwrap_or(0);
    let out = match kind {
        OpKind::MatMul => {
            let ga = if needs[0] {
                let bt = b.apply(OpKind::Transpose, &[&b.saved(inputs[1])])?;
                Some(b.apply(OpKind::MatMul, &[g, &bt])?)
            } else {
                None
            };
            let gb = if needs[1] {
                let at = b.apply(OpKind::Transpose, &[&b.saved(inputs[0])])?;
                Some(b.apply(OpKind::MatMul, &[&at, g])?)
            } else {
                None
            };
            vec![ga, gb]
        }
        OpKind::Transpose => vec![Some(b.apply(OpKind::Transpose, &[g])?)],
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![
            Some(g.clone()),
            if needs[1] {
                Some(b.apply(OpKind::Scale(-1.0), &[g])?)
            } else {
                None
            },
        ],
        OpKind::Mul => {
            let ga = if needs[0] {
                Some(b.apply(OpKind::Mul, &[g, &b.saved(inputs[1])])?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(b.apply(OpKind::Mul, &[g, &b.saved(inputs[0])])?)
            } else {
                None
            };
            vec![ga, gb]
        }
        OpKind::Scale(c) => vec![Some(b.apply(OpKind::Scale(*c), &[g])?)],
        OpKind::AddBias => vec![
            Some(g.clone()),
            if needs[1] {
                Some(b.apply(OpKind::SumRows, &[g])?)
            } else {
                None
            },
        ],
        OpKind::SumRows => vec![Some(b.apply(OpKind::BroadcastRows(rows(0)), &[g])?)],
        OpKind::BroadcastRows(_) => vec![Some(b.apply(OpKind::SumRows, &[g])?)],
        OpKind::Relu => {
            let mask = b.constant(kernels::relu_mask(&value(0)));
            vec![Some(b.apply(OpKind::Mul, &[g, &mask])?)]
        }
        OpKind::Square => {
            let gx = b.apply(OpKind::Mul, &[g, &b.saved(inputs[0])])?;
            vec![Some(b.apply(OpKind::Scale(2.0), &[&gx])?)]
        }
        OpKind::Sum => {
            let shape = value(0).shape().to_vec();
            vec![Some(b.apply(OpKind::Fill(shape), &[g])?)]
        }
        OpKind::Mean => {
            let x = value(0);
            let filled = b.apply(OpKind::Fill(x.shape().to_vec()), &[g])?;
            vec![Some(b.apply(OpKind::Scale(1.0 / x.numel() as f64), &[&filled])?)]
        }
        OpKind::Fill(_) => vec![Some(b.apply(OpKind::Sum, &[g])?)],
        OpKind::Softmax => {
            // s * (g - rowsum(g * s))
            let s = b.saved(id);
            let cols = value(0).shape()[1];
            let gs = b.apply(OpKind::Mul, &[g, &s])?;
            let r = b.apply(OpKind::RowSum, &[&gs])?;
            let rb = b.apply(OpKind::BroadcastCols(cols), &[&r])?;
            let centered = b.apply(OpKind::Sub, &[g, &rb])?;
            vec![Some(b.apply(OpKind::Mul, &[&s, &centered])?)]
        }
        OpKind::SoftmaxCrossEntropy(labels) => {
            // (softmax(z) - onehot(y)) * g / n
            let z = value(0);
            let (n, c) = (z.shape()[0], z.shape()[1]);
            let p = b.apply(OpKind::Softmax, &[&b.saved(inputs[0])])?;
            let onehot = b.constant(kernels::one_hot(labels, c));
            let diff = b.apply(OpKind::Sub, &[&p, &onehot])?;
            let gf = b.apply(OpKind::Fill(vec![n, c]), &[g])?;
            let scaled = b.apply(OpKind::Mul, &[&gf, &diff])?;
            vec![Some(b.apply(OpKind::Scale(1.0 / n as f64), &[&scaled])?)]
        }
        OpKind::RowSum => {
            let cols = value(0).shape()[1];
            vec![Some(b.apply(OpKind::BroadcastCols(cols), &[g])?)]
        }
        OpKind::BroadcastCols(_) => vec![Some(b.apply(OpKind::RowSum, &[g])?)],
        OpKind::ConcatRows => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, need) in needs.iter().enumerate() {
                let len = rows(i);
                grads.push(if *need {
                    Some(b.apply(OpKind::SliceRows { start, len }, &[g])?)
                } else {
                    None
                });
                start += len;
            }
            grads
        }
        OpKind::SliceRows { start, .. } => vec![Some(b.apply(
            OpKind::PadRows {
                start: *start,
                total: rows(0),
            },
            &[g],
        )?)],
        OpKind::PadRows { start, .. } => vec![Some(b.apply(
            OpKind::SliceRows {
                start: *start,
                len: rows(0),
            },
            &[g],
        )?)],
    };
    Ok(out)
}
