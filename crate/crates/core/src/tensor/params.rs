//! Named parameter arrays with deterministic initialization and graph binding.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, NodeId};

/// Ordered, named collection of trainable arrays. Insertion order is the
/// canonical order used for binding, gradient collection, optimizer state
/// and checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.clone(), self.arrays.len());
        self.names.push(name);
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = self.index[name];
        &self.arrays[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self.index[name];
        &mut self.arrays[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[ArrayD<f64>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.arrays
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> u64 {
        self.arrays.iter().map(|a| a.len() as u64).sum()
    }

    /// Insert every array as a differentiable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let ids = self
            .arrays
            .iter()
            .map(|a| g.leaf(a.clone(), true))
            .collect();
        Binding { ids }
    }

    /// Collect gradients for all parameters in insertion order, zeros where
    /// a parameter did not participate in the loss.
    pub fn collect_grads(&self, binding: &Binding, grads: &mut Gradients) -> Vec<ArrayD<f64>> {
        self.arrays
            .iter()
            .zip(&binding.ids)
            .map(|(a, id)| {
                grads
                    .take(*id)
                    .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
            })
            .collect()
    }
}

/// Node ids for a bound [`ParamStore`], aligned with insertion order.
pub struct Binding {
    pub ids: Vec<NodeId>,
}

impl Binding {
    pub fn id(&self, store: &ParamStore, name: &str) -> NodeId {
        self.ids[store.index[name]]
    }
}

/// Forward-pass context: the tape plus bound parameters.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub binding: &'a Binding,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, binding: &'a Binding) -> Self {
        Ctx { g, store, binding }
    }

    /// Node id of a named parameter.
    pub fn p(&self, name: &str) -> NodeId {
        self.binding.id(self.store, name)
    }
}

/// Gaussian init with the given standard deviation.
pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Xavier/Glorot normal init for a weight with the given fan-in/fan-out.
pub fn xavier(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    randn(rng, shape, std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}
