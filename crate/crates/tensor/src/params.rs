use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Converts element type (e.g. an `f32` model to `f64` for gradient checks).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// `(name, f32 tensor)` pairs in registration order, for checkpointing.
    pub fn named_f32(&self) -> Vec<(String, Tensor<f32>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.cast()))
            .collect()
    }

    /// Overwrites values from named tensors. Every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &HashMap<String, Tensor<f32>>) -> Result<()> {
        for e in &mut self.entries {
            let src = named
                .get(&e.name)
                .ok_or_else(|| TensorError::Format(format!("missing tensor {}", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(TensorError::shape(
                    "load_named",
                    format!("{}: stored {:?}, model {:?}", e.name, src.shape(), e.value.shape()),
                ));
            }
            e.value = src.cast();
        }
        Ok(())
    }
}

/// A forward pass: a fresh [`Graph`] plus lazily bound parameters.
///
/// Parameters enter the graph as leaves the first time they are requested.
/// They require gradients only when the session is in training mode and the
/// parameter is marked trainable.
pub struct Session<'s, T: Real> {
    graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            train,
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let requires = self.train && self.store.is_trainable(id);
        let v = self.graph.leaf(self.store.get(id).clone(), requires)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Runs backward from `loss` and returns per-parameter gradients, indexed
    /// like the store. Parameters that were unused or frozen get `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        self.graph.backward(loss)?;
        let mut out = Vec::with_capacity(self.bound.len());
        for slot in &self.bound {
            out.push(match slot {
                Some(v) if self.graph.requires_grad(*v) => self.graph.take_grad(*v),
                _ => None,
            });
        }
        Ok(out)
    }
}

impl<T: Real> Deref for Session<'_, T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T: Real> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}
