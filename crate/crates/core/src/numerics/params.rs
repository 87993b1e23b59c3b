//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Replaces all values from `(name, tensor)` pairs; names and shapes must
    /// match exactly.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return shape_err(format!("expected {} tensors, got {}", self.tensors.len(), entries.len()));
        }
        for (name, t) in entries {
            let i = *self
                .lookup
                .get(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return shape_err(format!("{name}: {:?} vs {:?}", t.shape(), self.tensors[i].shape()));
            }
        }
        for (name, t) in entries {
            let i = self.lookup[name];
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t, trainable)).collect() }
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds explicit tape variables, one per store tensor in order.
    pub fn from_vars(store: &ParamStore, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Shape(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Self { vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; absent gradients are zeros.
    pub fn grads<T: Real>(&self, store: &ParamStore, g: &Gradients<T>) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| match g.get(v) {
                Some(d) => Tensor::new(t.shape(), d.iter().map(|x| x.f32()).collect()).expect("grad shape"),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}
