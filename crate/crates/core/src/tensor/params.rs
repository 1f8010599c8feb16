use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use sha2::{Digest, Sha256};

use super::{Grads, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named parameter table shared by every module of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Copies values for every parameter whose (optionally renamed) name and
    /// shape match an entry of `src`. Returns the number copied.
    pub fn copy_matching<T: Scalar>(&mut self, src: &ParamStore<T>, rename: impl Fn(&str) -> String) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(j) = src.index.get(&rename(&p.name)) {
                let s = &src.params[*j].value;
                if s.shape() == p.value.shape() {
                    p.value = s.cast();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Strict load: every parameter must be present in `src` with equal shape.
    pub fn load_from<T: Scalar>(&mut self, src: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let j = src
                .index
                .get(&p.name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks parameter {}", p.name)))?;
            let s = &src.params[*j].value;
            if s.shape() != p.value.shape() {
                return Err(Error::shape("load_params", p.value.shape(), s.shape()));
            }
            p.value = s.cast();
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names and `f32` little-endian bytes of the frozen
    /// parameters, in registration order.
    pub fn frozen_hash(&self) -> String {
        self.hash_where(|p| !p.trainable)
    }

    pub fn hash_where(&self, keep: impl Fn(&Param<S>) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Forward-pass context: a fresh [`Graph`] plus lazily bound parameter leaves.
pub struct Ctx<'a, S> {
    graph: Graph<S>,
    store: &'a ParamStore<S>,
    bound: Vec<Option<Var>>,
    grad_all: bool,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            grad_all: false,
        }
    }

    /// Like [`Ctx::new`] but every parameter, frozen or not, gets a gradient.
    pub fn with_all_grads(store: &'a ParamStore<S>) -> Self {
        Self {
            grad_all: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    /// Leaf for parameter `id`; frozen parameters are bound without gradient.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if param.trainable || self.grad_all {
            self.graph.leaf(param.value.clone())
        } else {
            self.graph.input(param.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Gradients of the bound parameters that received one.
    pub fn param_grads(&self, grads: &Grads<S>) -> Vec<(ParamId, Vec<S>)> {
        self.bound_params()
            .filter_map(|(id, v)| grads.get_raw(v).map(|g| (id, g.to_vec())))
            .collect()
    }

    pub fn graph(&self) -> &Graph<S> {
        &self.graph
    }
}

impl<S> Deref for Ctx<'_, S> {
    type Target = Graph<S>;
    fn deref(&self) -> &Graph<S> {
        &self.graph
    }
}

impl<S> DerefMut for Ctx<'_, S> {
    fn deref_mut(&mut self) -> &mut Graph<S> {
        &mut self.graph
    }
}
