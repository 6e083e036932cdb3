//! MLP parameters split into a shared feature extractor, a meta-learner head
//! and a co-learner head.
//!
//! Parameter names encode the structure: `fe.{i}.w` / `fe.{i}.b` for the
//! feature extractor, `head.w` / `head.b` for the meta-learner and
//! `co.{i}.w` / `co.{i}.b` for the co-learner. Weights are `[fan_in, fan_out]`
//! and biases `[fan_out]`; layers compute `x W + b`.

use std::sync::Arc;

use metacoop_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{Stream, TaskRng};
use crate::tasks::Targets;

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    /// Shared feature extractor (psi).
    FeatureExtractor,
    /// Meta-learner head (theta).
    MetaHead,
    /// Co-learner head (phi).
    CoHead,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::FeatureExtractor, Partition::MetaHead, Partition::CoHead];

    pub fn tag(self) -> u8 {
        match self {
            Partition::FeatureExtractor => 0,
            Partition::MetaHead => 1,
            Partition::CoHead => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.tag() == tag)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Partition::FeatureExtractor => "fe",
            Partition::MetaHead => "meta",
            Partition::CoHead => "co",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
}

/// Names, partitions and shapes of a [`ParamSet`], plus the layer structure
/// recovered from the names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamInfo>,
    fe: Vec<(usize, usize)>,
    head: Option<(usize, usize)>,
    co: Vec<(usize, usize)>,
}

impl ParamLayout {
    pub fn new(entries: Vec<ParamInfo>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(CoreError::DuplicateParam(e.name.clone()));
            }
        }
        let find = |name: &str| entries.iter().position(|e| e.name == name);
        let layers = |prefix: &str| {
            let mut out = Vec::new();
            while let (Some(w), Some(b)) = (
                find(&format!("{prefix}.{}.w", out.len())),
                find(&format!("{prefix}.{}.b", out.len())),
            ) {
                out.push((w, b));
            }
            out
        };
        let fe = layers("fe");
        let co = layers("co");
        let head = find("head.w").zip(find("head.b"));
        Ok(Self { entries, fe, head, co })
    }

    pub fn entries(&self) -> &[ParamInfo] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn indices(&self, partition: Partition) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].partition == partition)
            .collect()
    }

    pub fn has_partition(&self, partition: Partition) -> bool {
        self.entries.iter().any(|e| e.partition == partition)
    }

    /// `(weight index, bias index)` per feature-extractor layer, in order.
    pub fn feature_layers(&self) -> &[(usize, usize)] {
        &self.fe
    }

    pub fn co_layers(&self) -> &[(usize, usize)] {
        &self.co
    }

    pub fn head(&self) -> Option<(usize, usize)> {
        self.head
    }
}

/// Ordered, named parameter tensors. Immutable once built; updates produce
/// new sets sharing the same layout.
#[derive(Clone, Debug)]
pub struct ParamSet {
    layout: Arc<ParamLayout>,
    values: Vec<Tensor>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.values == other.values
    }
}

impl ParamSet {
    pub fn from_parts(entries: Vec<(String, Partition, Tensor)>) -> Result<Self> {
        let (infos, values): (Vec<_>, Vec<_>) = entries
            .into_iter()
            .map(|(name, partition, t)| {
                (
                    ParamInfo {
                        name,
                        partition,
                        shape: t.shape().to_vec(),
                    },
                    t,
                )
            })
            .unzip();
        Ok(Self {
            layout: Arc::new(ParamLayout::new(infos)?),
            values,
        })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layout.index_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamInfo, &Tensor)> {
        self.layout.entries.iter().zip(&self.values)
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.values.len() || values.iter().zip(&self.values).any(|(a, b)| a.shape() != b.shape()) {
            return Err(CoreError::LengthMismatch(
                "replacement values do not match the parameter layout".into(),
            ));
        }
        Ok(Self {
            layout: self.layout.clone(),
            values,
        })
    }

    /// Copy without the given partition's entries.
    pub fn without(&self, partition: Partition) -> Result<Self> {
        ParamSet::from_parts(
            self.iter()
                .filter(|(info, _)| info.partition != partition)
                .map(|(info, t)| (info.name.clone(), info.partition, t.clone()))
                .collect(),
        )
    }

    /// Scalar count, optionally restricted to one partition.
    pub fn count(&self, partition: Option<Partition>) -> usize {
        self.iter()
            .filter(|(info, _)| partition.is_none_or(|p| info.partition == p))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.layout == other.layout && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
    }

    /// FNV-1a over the bit patterns of one partition's values.
    pub fn checksum(&self, partition: Partition) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (info, t) in self.iter() {
            if info.partition != partition {
                continue;
            }
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &Graph) -> ParamVars {
        ParamVars {
            layout: self.layout.clone(),
            vars: self.values.iter().map(|t| g.input(t.clone())).collect(),
        }
    }
}

/// A [`ParamSet`] layout bound to graph nodes.
#[derive(Clone, Debug)]
pub struct ParamVars {
    layout: Arc<ParamLayout>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn set(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.layout
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| CoreError::MissingParam(name.into()))
    }

    /// Reads the current values back into a [`ParamSet`].
    pub fn snapshot(&self, g: &Graph) -> ParamSet {
        ParamSet {
            layout: self.layout.clone(),
            values: self.vars.iter().map(|&v| (*g.value(v)).clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths of the two-headed MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// Hidden widths of the co-learner; its input is the last feature width.
    pub co_hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    /// `1 -> 40 -> 40 -> 1` with a `40 -> 40 -> 1` co-learner.
    pub fn sinusoid() -> Self {
        Self {
            input_dim: 1,
            hidden_dims: vec![40, 40],
            output_dim: 1,
            co_hidden_dims: vec![40],
            activation: Activation::Relu,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        let dims = std::iter::once(&self.input_dim)
            .chain(&self.hidden_dims)
            .chain(std::iter::once(&self.output_dim))
            .chain(&self.co_hidden_dims);
        if dims.into_iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidSpec(format!("zero dimension in {self:?}")));
        }
        Ok(())
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws weights uniformly within [`init_bound`] and zero biases, in the order
/// feature extractor, meta head, co head. The extractor and meta head values
/// therefore do not depend on the co-learner's shape.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = TaskRng::new(seed).substream(Stream::Init, 0);
    let mut entries = Vec::new();
    let mut layer = |rng: &mut TaskRng, prefix: String, partition, fan_in, fan_out| {
        let bound = init_bound(fan_in, fan_out);
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        entries.push((
            format!("{prefix}.w"),
            partition,
            Tensor::matrix(fan_in, fan_out, w).expect("consistent weight shape"),
        ));
        entries.push((format!("{prefix}.b"), partition, Tensor::zeros(vec![fan_out])));
    };

    let mut width = spec.input_dim;
    for (i, &h) in spec.hidden_dims.iter().enumerate() {
        layer(&mut rng, format!("fe.{i}"), Partition::FeatureExtractor, width, h);
        width = h;
    }
    let features = width;
    layer(&mut rng, "head".into(), Partition::MetaHead, features, spec.output_dim);
    let mut width = features;
    for (i, &h) in spec.co_hidden_dims.iter().enumerate() {
        layer(&mut rng, format!("co.{i}"), Partition::CoHead, width, h);
        width = h;
    }
    let last = spec.co_hidden_dims.len();
    layer(
        &mut rng,
        format!("co.{last}"),
        Partition::CoHead,
        width,
        spec.output_dim,
    );
    ParamSet::from_parts(entries)
}

fn linear(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    Ok(g.add_bias(g.matmul(x, w)?, b)?)
}

/// Post-activation output of every feature-extractor layer.
pub fn feature_activations(g: &Graph, params: &ParamVars, x: Var) -> Result<Vec<Var>> {
    let mut h = x;
    let mut out = Vec::new();
    for &(w, b) in params.layout.feature_layers() {
        h = g.relu(linear(g, h, params.var(w), params.var(b))?)?;
        out.push(h);
    }
    Ok(out)
}

/// Meta-learner path: returns `(features, output)`.
pub fn forward_meta(g: &Graph, params: &ParamVars, x: Var) -> Result<(Var, Var)> {
    let features = feature_activations(g, params, x)?.last().copied().unwrap_or(x);
    let (w, b) = params
        .layout
        .head()
        .ok_or_else(|| CoreError::MissingParam("head.w".into()))?;
    let out = linear(g, features, params.var(w), params.var(b))?;
    Ok((features, out))
}

/// Shared feature extractor only.
pub fn forward_features(g: &Graph, params: &ParamVars, x: Var) -> Result<Var> {
    Ok(feature_activations(g, params, x)?.last().copied().unwrap_or(x))
}

/// Co-learner path on top of already computed features.
pub fn forward_co(g: &Graph, params: &ParamVars, features: Var) -> Result<Var> {
    g.bump("forward_co");
    let layers = params.layout.co_layers();
    let Some((last, hidden)) = layers.split_last() else {
        return Err(CoreError::MissingParam("co.0.w".into()));
    };
    let mut h = features;
    for &(w, b) in hidden {
        h = g.relu(linear(g, h, params.var(w), params.var(b))?)?;
    }
    linear(g, h, params.var(last.0), params.var(last.1))
}

/// Mean squared error for regression targets, mean softmax cross-entropy for
/// class labels.
pub fn task_loss(g: &Graph, output: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Regression(y) => {
            let yv = g.input(y.clone());
            Ok(g.mse(output, yv)?)
        }
        Targets::Classes(labels) => Ok(g.softmax_cross_entropy(output, labels)?),
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let Some((n, c)) = logits.dims2() else { return 0.0 };
    if n == 0 {
        return 0.0;
    }
    let d = logits.data();
    let hits = (0..n)
        .filter(|&i| {
            let row = &d[i * c..(i + 1) * c];
            let best = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            best == labels[i]
        })
        .count();
    hits as f64 / n as f64
}
