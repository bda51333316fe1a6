use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::dense::Tensor;
use super::graph::{Gradients, Graph, Var};
use crate::error::{dim_err, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
///
/// A store binds each parameter to a graph at most once, so a parameter used
/// several times in one pass accumulates its gradient on a single leaf.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones get a fresh identity so both copies can be bound to one graph.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            trainable: self.trainable,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            trainable: true,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with std `1/sqrt(fan_in)`.
    pub fn add_init<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    /// When false, bound parameters are graph constants and receive no gradient.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Leaf for `id` on `g`, created on first use.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(&v) = g.bound.get(&(self.uid, id.0)) {
            return v;
        }
        let v = g.leaf(self.values[id.0].clone(), self.trainable);
        g.bound.insert((self.uid, id.0), v);
        v
    }

    /// Per-parameter gradients from a backward pass (zeros for unused ones).
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| match g.bound.get(&(self.uid, i)) {
                Some(&v) => grads.get_or_zeros(v, t.numel()),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Copies every value from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return dim_err("copy_from", "parameter names differ");
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return dim_err("copy_from", format!("{:?} vs {:?}", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
