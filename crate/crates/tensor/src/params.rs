use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every tensor of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Self) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Per-tensor content digests.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.digest()))
            .collect()
    }

    /// One digest over all names and contents.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, d) in self.digests() {
            h.update(k.as_bytes());
            h.update([0u8]);
            h.update(d.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        rng: &mut R,
    ) {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        self.insert(format!("{name}.weight"), Tensor::uniform(&[out_ch, in_ch, k, k], bound, rng));
        self.insert(format!("{name}.bias"), Tensor::uniform(&[out_ch], bound, rng));
    }

    pub fn init_zero_conv(&mut self, name: &str, out_ch: usize, in_ch: usize) {
        self.insert(format!("{name}.weight"), Tensor::zeros(&[out_ch, in_ch, 1, 1]));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
    }

    pub fn init_linear<R: Rng + ?Sized>(&mut self, name: &str, out_f: usize, in_f: usize, rng: &mut R) {
        let bound = 1.0 / (in_f as f64).sqrt();
        self.insert(format!("{name}.weight"), Tensor::uniform(&[out_f, in_f], bound, rng));
        self.insert(format!("{name}.bias"), Tensor::uniform(&[out_f], bound, rng));
    }

    pub fn init_norm(&mut self, name: &str, ch: usize) {
        self.insert(format!("{name}.gamma"), Tensor::full(&[ch], T::one()));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[ch]));
    }
}

/// Lazily lifts the tensors of a [`ParamStore`] into a [`Graph`], either as
/// differentiable leaves (`trainable`) or as constants.
pub struct Bound<'a, T: Float> {
    graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    prefix: String,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Float> Bound<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self::prefixed(graph, store, trainable, "")
    }

    /// Like [`Bound::new`], but `get(name)` reads `prefix + name`. Gradient
    /// keys carry the full stored name.
    pub fn prefixed(graph: &'a Graph<T>, store: &'a ParamStore<T>, trainable: bool, prefix: &str) -> Self {
        Self {
            graph,
            store,
            trainable,
            prefix: prefix.to_string(),
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        let name = format!("{}{name}", self.prefix);
        if let Some(v) = self.vars.borrow().get(&name) {
            return Ok(*v);
        }
        let t = self.store.get(&name)?.clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name, v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(&format!("{}{name}", self.prefix))
    }

    /// Gradients of every bound tensor. Tensors that did not influence the
    /// loss get a zero gradient.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(&self.graph.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn conv(&self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        self.graph.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn linear(&self, x: Var, name: &str) -> Result<Var> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        self.graph.linear(x, w, b)
    }

    pub fn group_norm(&self, x: Var, name: &str, groups: usize) -> Result<Var> {
        let gamma = self.get(&format!("{name}.gamma"))?;
        let beta = self.get(&format!("{name}.beta"))?;
        self.graph.group_norm(x, gamma, beta, groups)
    }
}
