use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::backward::{self, Backend};
use crate::error::{AutodiffError, Result};
use crate::kernels::{self, OpKind};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
///
/// A `Var` is only meaningful for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Apply(OpKind),
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) value: Arc<Tensor>,
}

/// Append-only computation tape.
///
/// Every node's inputs precede it, so node order is a topological order.
/// Gradients can themselves be recorded ([`Graph::gradient_graph`]), which is
/// what makes differentiating through an optimizer step possible.
///
/// While frozen, operations still compute values but are stored as leaves
/// without history, and gradient requests fail.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    frozen: Cell<bool>,
    counters: RefCell<BTreeMap<&'static str, u64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freeze(&self) {
        self.frozen.set(true);
    }

    pub fn unfreeze(&self) {
        self.frozen.set(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    /// Increments a named event counter (used for instrumentation).
    pub fn bump(&self, key: &'static str) {
        *self.counters.borrow_mut().entry(key).or_default() += 1;
    }

    pub fn counter(&self, key: &str) -> u64 {
        self.counters.borrow().get(key).copied().unwrap_or(0)
    }

    /// Records a leaf value. Gradients may be taken with respect to it.
    pub fn input(&self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value))
    }

    /// Same values as `v`, with no linkage to its history.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_leaf(value)
    }

    fn push_leaf(&self, value: Arc<Tensor>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub(crate) fn node(&self, id: usize) -> Node {
        self.nodes.borrow()[id].clone()
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<Arc<Tensor>> = {
            let nodes = self.nodes.borrow();
            inputs.iter().map(|v| nodes[v.0].value.clone()).collect()
        };
        let refs: Vec<&Tensor> = values.iter().map(Arc::as_ref).collect();
        let out = kernels::forward(&kind, &refs)?;
        if !out.is_finite() {
            return Err(AutodiffError::NonFinite { op: kind.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let node = if self.frozen.get() {
            Node {
                op: Op::Leaf,
                inputs: Vec::new(),
                value: Arc::new(out),
            }
        } else {
            Node {
                op: Op::Apply(kind),
                inputs: inputs.iter().map(|v| v.0).collect(),
                value: Arc::new(out),
            }
        };
        nodes.push(node);
        Ok(Var(nodes.len() - 1))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::AddBias, &[x, b])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[x])
    }

    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(OpKind::SoftmaxCrossEntropy(Arc::from(labels)), &[logits])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff)?;
        self.mean(sq)
    }

    /// `d loss / d wrt` as plain tensors. Appends nothing to the graph.
    ///
    /// A `wrt` entry the loss does not depend on gets an explicit zero tensor.
    pub fn gradient(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.check_loss(loss)?;
        let backend = Numeric { graph: self };
        let grads = backward::backprop(self, &backend, loss.0, &wrt.iter().map(|v| v.0).collect::<Vec<_>>())?;
        Ok(grads
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| match g {
                Some(t) => Arc::unwrap_or_clone(t),
                None => Tensor::zeros_like(&self.value(*w)),
            })
            .collect())
    }

    /// `d loss / d wrt` recorded as differentiable nodes, so the result can be
    /// differentiated again.
    pub fn gradient_graph(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_loss(loss)?;
        let backend = Symbolic { graph: self };
        let grads = backward::backprop(self, &backend, loss.0, &wrt.iter().map(|v| v.0).collect::<Vec<_>>())?;
        Ok(grads
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| g.unwrap_or_else(|| self.input(Tensor::zeros_like(&self.value(*w)))))
            .collect())
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        if self.frozen.get() {
            return Err(AutodiffError::Frozen);
        }
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(AutodiffError::NotScalar(value.shape().to_vec()));
        }
        Ok(())
    }
}

/// Evaluates backward rules directly on tensors.
struct Numeric<'g> {
    graph: &'g Graph,
}

impl Backend for Numeric<'_> {
    type T = Arc<Tensor>;

    fn saved(&self, id: usize) -> Self::T {
        self.graph.nodes.borrow()[id].value.clone()
    }

    fn constant(&self, value: Tensor) -> Self::T {
        Arc::new(value)
    }

    fn apply(&self, kind: OpKind, inputs: &[&Self::T]) -> Result<Self::T> {
        let refs: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        let out = kernels::forward(&kind, &refs)?;
        if !out.is_finite() {
            return Err(AutodiffError::NonFinite { op: kind.name() });
        }
        Ok(Arc::new(out))
    }
}

/// Records backward rules as graph nodes.
struct Symbolic<'g> {
    graph: &'g Graph,
}

impl Backend for Symbolic<'_> {
    type T = Var;

    fn saved(&self, id: usize) -> Self::T {
        Var(id)
    }

    fn constant(&self, value: Tensor) -> Self::T {
        self.graph.input(value)
    }

    fn apply(&self, kind: OpKind, inputs: &[&Self::T]) -> Result<Self::T> {
        let vars: Vec<Var> = inputs.iter().map(|v| **v).collect();
        self.graph.apply(kind, &vars)
    }
}
