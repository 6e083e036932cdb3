//! Numeric kernels shared by the forward pass and the non-recording backward
//! pass. Every reduction accumulates sequentially in index order so results
//! are bitwise reproducible.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// The differentiable operations a [`crate::Graph`] can record.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul,
    Transpose,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    /// `[n, m] + [m]` broadcast over rows.
    AddBias,
    /// Column sums `[n, m] -> [m]`.
    SumRows,
    /// `[m] -> [n, m]`
    BroadcastRows(usize),
    Relu,
    Square,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    /// Scalar to a constant-valued tensor of the given shape.
    Fill(Vec<usize>),
    /// Row-wise softmax of a `[n, c]` matrix.
    Softmax,
    /// Mean over rows of `logsumexp(z_i) - z_i[label_i]`.
    SoftmaxCrossEntropy(Arc<[usize]>),
    /// Row sums `[n, c] -> [n]`.
    RowSum,
    /// `[n] -> [n, c]`
    BroadcastCols(usize),
    ConcatRows,
    SliceRows {
        start: usize,
        len: usize,
    },
    /// Embeds `[len, c]` into zero rows `[total, c]` at `start`.
    PadRows {
        start: usize,
        total: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::SumRows => "sum_rows",
            OpKind::BroadcastRows(_) => "broadcast_rows",
            OpKind::Relu => "relu",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Fill(_) => "fill",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            OpKind::RowSum => "row_sum",
            OpKind::BroadcastCols(_) => "broadcast_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::PadRows { .. } => "pad_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::AddBias => Some(2),
            OpKind::ConcatRows => None,
            _ => Some(1),
        }
    }
}

/// Evaluates `kind` on `inputs`. Does not check finiteness.
pub fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind.arity() {
        Some(n) if n != inputs.len() => {
            return Err(AutodiffError::Arity {
                op: kind.name(),
                expected: n,
                got: inputs.len(),
            })
        }
        None if inputs.is_empty() => {
            return Err(AutodiffError::Arity {
                op: kind.name(),
                expected: 1,
                got: 0,
            })
        }
        _ => {}
    }
    match kind {
        OpKind::MatMul => matmul(inputs[0], inputs[1]),
        OpKind::Transpose => transpose(inputs[0]),
        OpKind::Add => zip(inputs[0], inputs[1], "add", |a, b| a + b),
        OpKind::Sub => zip(inputs[0], inputs[1], "sub", |a, b| a - b),
        OpKind::Mul => zip(inputs[0], inputs[1], "mul", |a, b| a * b),
        OpKind::Scale(c) => Ok(inputs[0].map(|v| v * c)),
        OpKind::AddBias => add_bias(inputs[0], inputs[1]),
        OpKind::SumRows => sum_rows(inputs[0]),
        OpKind::BroadcastRows(n) => broadcast_rows(inputs[0], *n),
        OpKind::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        OpKind::Square => Ok(inputs[0].map(|v| v * v)),
        OpKind::Sum => Ok(Tensor::scalar(sum(inputs[0].data()))),
        OpKind::Mean => {
            let x = inputs[0];
            if x.numel() == 0 {
                return Err(shape_err("mean", "empty tensor".into()));
            }
            Ok(Tensor::scalar(sum(x.data()) / x.numel() as f64))
        }
        OpKind::Fill(shape) => {
            let v = inputs[0]
                .item()
                .ok_or_else(|| shape_err("fill", format!("input {:?} is not a scalar", inputs[0].shape())))?;
            Ok(Tensor::filled(shape.clone(), v))
        }
        OpKind::Softmax => softmax(inputs[0]),
        OpKind::SoftmaxCrossEntropy(labels) => softmax_cross_entropy(inputs[0], labels),
        OpKind::RowSum => row_sum(inputs[0]),
        OpKind::BroadcastCols(c) => broadcast_cols(inputs[0], *c),
        OpKind::ConcatRows => concat_rows(inputs),
        OpKind::SliceRows { start, len } => slice_rows(inputs[0], *start, *len),
        OpKind::PadRows { start, total } => pad_rows(inputs[0], *start, *total),
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

pub(crate) fn sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

fn zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = dims2(a, "matmul")?;
    let (k2, m) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    // Every output element accumulates its products in `p` order starting
    // from 0.0, so both paths below give identical bits.
    if m == 1 {
        let out = ad
            .chunks_exact(k.max(1))
            .take(n)
            .map(|row| row.iter().zip(bd).fold(0.0, |acc, (x, y)| acc + x * y))
            .collect();
        return Tensor::matrix(n, m, out);
    }
    let mut out = vec![0.0; n * m];
    // Four output rows at a time share each load of a `b` row.
    let mut i = 0;
    while i + 4 <= n {
        let (r0, rest) = out[i * m..(i + 4) * m].split_at_mut(m);
        let (r1, rest) = rest.split_at_mut(m);
        let (r2, r3) = rest.split_at_mut(m);
        for p in 0..k {
            let brow = &bd[p * m..(p + 1) * m];
            let [a0, a1, a2, a3] = [0, 1, 2, 3].map(|r| ad[(i + r) * k + p]);
            for j in 0..m {
                let b = brow[j];
                r0[j] += a0 * b;
                r1[j] += a1 * b;
                r2[j] += a2 * b;
                r3[j] += a3 * b;
            }
        }
        i += 4;
    }
    for i in i..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (n, m) = dims2(a, "transpose")?;
    let d = a.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    Tensor::matrix(m, n, out)
}

fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = dims2(x, "add_bias")?;
    if b.shape() != [m] {
        return Err(shape_err("add_bias", format!("[{n}, {m}] + {:?}", b.shape())));
    }
    let bd = b.data();
    let data = x.data().iter().enumerate().map(|(idx, &v)| v + bd[idx % m]).collect();
    Tensor::matrix(n, m, data)
}

fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (n, m) = dims2(x, "sum_rows")?;
    let d = x.data();
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(&d[i * m..(i + 1) * m]) {
            *o += v;
        }
    }
    Ok(Tensor::vector(out))
}

fn broadcast_rows(b: &Tensor, n: usize) -> Result<Tensor> {
    if b.rank() != 1 {
        return Err(shape_err(
            "broadcast_rows",
            format!("expected a vector, got {:?}", b.shape()),
        ));
    }
    let m = b.numel();
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        data.extend_from_slice(b.data());
    }
    Tensor::matrix(n, m, data)
}

fn row_sum(x: &Tensor) -> Result<Tensor> {
    let (n, c) = dims2(x, "row_sum")?;
    let d = x.data();
    Ok(Tensor::vector((0..n).map(|i| sum(&d[i * c..(i + 1) * c])).collect()))
}

fn broadcast_cols(v: &Tensor, c: usize) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(shape_err(
            "broadcast_cols",
            format!("expected a vector, got {:?}", v.shape()),
        ));
    }
    let n = v.numel();
    let data = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect();
    Tensor::matrix(n, c, data)
}

fn softmax(x: &Tensor) -> Result<Tensor> {
    let (n, c) = dims2(x, "softmax")?;
    let d = x.data();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &d[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..(i + 1) * c];
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
        }
        let z = sum(dst);
        for o in dst.iter_mut() {
            *o /= z;
        }
    }
    Tensor::matrix(n, c, out)
}

fn softmax_cross_entropy(z: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = dims2(z, "softmax_cross_entropy")?;
    if labels.len() != n || n == 0 {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let d = z.data();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &d[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
        total += lse - row[label];
    }
    Ok(Tensor::scalar(total / n as f64))
}

/// One-hot encoding `[n, classes]` of integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("consistent one-hot shape")
}

fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let (_, c) = dims2(parts[0], "concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, pc) = dims2(p, "concat_rows")?;
        if pc != c {
            return Err(shape_err("concat_rows", format!("column counts {c} vs {pc}")));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, c, data)
}

fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c) = dims2(x, "slice_rows")?;
    if start + len > n {
        return Err(shape_err("slice_rows", format!("rows {start}..{} of {n}", start + len)));
    }
    Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())
}

fn pad_rows(x: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    let (len, c) = dims2(x, "pad_rows")?;
    if start + len > total {
        return Err(shape_err(
            "pad_rows",
            format!("rows {start}..{} of {total}", start + len),
        ));
    }
    let mut data = vec![0.0; total * c];
    data[start * c..(start + len) * c].copy_from_slice(x.data());
    Tensor::matrix(total, c, data)
}

/// Derivative mask of relu; zero at exactly zero.
pub(crate) fn relu_mask(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_zeroes_negatives() {
        let out = forward(&OpKind::Relu, &[&t(&[3], &[-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_of_two() {
        let out = forward(&OpKind::Mean, &[&t(&[2], &[2.0, 4.0])]).unwrap();
        assert_eq!(out.item(), Some(3.0));
        assert_eq!(out.rank(), 0);
    }

    #[test]
    fn matmul_by_hand() {
        let out = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        assert!(matches!(
            matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 1], &[3.0])),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn arity_is_checked() {
        let a = t(&[1], &[1.0]);
        assert!(matches!(forward(&OpKind::Add, &[&a]), Err(AutodiffError::Arity { .. })));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let z = t(&[1, 2], &[1000.0, 0.0]);
        let s = forward(&OpKind::Softmax, &[&z]).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        let ce = forward(&OpKind::SoftmaxCrossEntropy(Arc::from(vec![1usize])), &[&z]).unwrap();
        assert!((ce.item().unwrap() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let z = t(&[2, 4], &[0.0; 8]);
        let ce = forward(&OpKind::SoftmaxCrossEntropy(Arc::from(vec![0usize, 3])), &[&z]).unwrap();
        assert!((ce.item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let z = t(&[1, 2], &[0.0, 0.0]);
        assert!(forward(&OpKind::SoftmaxCrossEntropy(Arc::from(vec![2usize])), &[&z]).is_err());
    }

    #[test]
    fn concat_slice_pad() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = forward(&OpKind::ConcatRows, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        let s = forward(&OpKind::SliceRows { start: 1, len: 2 }, &[&c]).unwrap();
        assert_eq!(s, b);
        let p = forward(&OpKind::PadRows { start: 1, total: 4 }, &[&b]).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn bias_broadcast_and_reductions() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        let y = forward(&OpKind::AddBias, &[&x, &b]).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(sum_rows(&x).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(row_sum(&x).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(broadcast_cols(&b, 2).unwrap().data(), &[10.0, 10.0, 20.0, 20.0]);
    }
}
