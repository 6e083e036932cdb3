//! Meta-learning variants as interchangeable strategies.
//!
//! All variants share one bilevel template: adapt some partitions on the
//! support set, then sum a query objective over the batch. A [`MetaMethod`]
//! only decides which partitions adapt, how the co-learner loss is weighted
//! in each loop, and which outer gradients are discarded.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::nn::Partition;

pub trait MetaMethod: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    /// Whether the co-learner is adapted in the inner loop.
    fn adapts_co(&self) -> bool {
        false
    }

    /// Weight of the co-learner loss in the support objective.
    fn inner_co_weight(&self, _gamma: f64) -> f64 {
        0.0
    }

    /// Weight of the co-learner loss in the query objective, or `None` when
    /// the method has no co-learner term.
    fn outer_co_weight(&self, gamma: f64) -> Option<f64> {
        Some(gamma)
    }

    /// Partitions whose outer gradients are dropped before the update.
    fn frozen_partitions(&self) -> &'static [Partition] {
        &[]
    }
}

/// Plain MAML on the feature extractor and meta head.
#[derive(Debug)]
pub struct Maml;

impl MetaMethod for Maml {
    fn name(&self) -> &'static str {
        "maml"
    }

    fn outer_co_weight(&self, _gamma: f64) -> Option<f64> {
        None
    }
}

/// Co-learner joins only the outer objective; it never adapts.
#[derive(Debug)]
pub struct Cooperative;

impl MetaMethod for Cooperative {
    fn name(&self) -> &'static str {
        "cml"
    }
}

/// Multi-head baseline: the co-learner adapts alongside the meta-learner.
#[derive(Debug)]
pub struct Collaborative;

impl MetaMethod for Collaborative {
    fn name(&self) -> &'static str {
        "cl"
    }

    fn adapts_co(&self) -> bool {
        true
    }

    fn inner_co_weight(&self, gamma: f64) -> f64 {
        gamma
    }
}

/// Co-learner frozen at its random initialisation; its loss only perturbs
/// the feature-extractor gradient.
#[derive(Debug)]
pub struct RandomNoise;

impl MetaMethod for RandomNoise {
    fn name(&self) -> &'static str {
        "noise"
    }

    fn frozen_partitions(&self) -> &'static [Partition] {
        &[Partition::CoHead]
    }
}

/// Methods by (case-insensitive) name.
pub struct MethodRegistry {
    methods: BTreeMap<String, Arc<dyn MetaMethod>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self {
            methods: BTreeMap::new(),
        };
        r.register(Arc::new(Maml));
        r.register(Arc::new(Cooperative));
        r.register(Arc::new(Collaborative));
        r.register(Arc::new(RandomNoise));
        r
    }
}

impl MethodRegistry {
    pub fn register(&mut self, method: Arc<dyn MetaMethod>) {
        self.methods.insert(method.name().to_ascii_lowercase(), method);
    }

    pub fn names(&self) -> Vec<String> {
        self.methods.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn MetaMethod>> {
        self.methods
            .get(&name.to_ascii_lowercase())
            .cloned()
            .ok_or_else(|| CoreError::Unknown {
                kind: "method",
                name: name.into(),
                known: self.names().join(", "),
            })
    }
}
