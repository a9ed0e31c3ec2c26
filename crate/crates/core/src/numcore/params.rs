use std::collections::HashMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors with their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId(self.entries.len() - 1))
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replace a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grad` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor)], scale: f64) {
        for (id, g) in grads {
            let buf = self.entries[id.0].grad.data_mut();
            for (a, b) in buf.iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Load values by name; every stored name must be present with the same shape.
    pub fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = lookup
                .get(e.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = (*t).clone();
        }
        Ok(())
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// A tape plus lazily bound parameters from a store.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<ParamId, Var>,
    track_grad: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, track_grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            track_grad,
        }
    }

    /// Continues recording on an existing tape.
    pub fn from_tape(store: &'s ParamStore, tape: Tape, track_grad: bool) -> Self {
        Self {
            tape,
            store,
            bound: HashMap::new(),
            track_grad,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Makes `param(id)` return `value` instead of a leaf holding the stored
    /// tensor, e.g. to differentiate through a reparameterisation.
    pub fn bind(&mut self, id: ParamId, value: Var) -> Result<()> {
        let want = self.store.value(id).shape();
        if self.tape.shape(value) != want {
            return Err(Error::shape("session bind", self.tape.shape(value), want));
        }
        if self.bound.insert(id, value).is_some() {
            return Err(Error::InvalidArgument(format!(
                "parameter `{}` is already bound",
                self.store.name(id)
            )));
        }
        Ok(())
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn tracks_grad(&self) -> bool {
        self.track_grad
    }

    /// Leaf for `id`, created on first use and reused afterwards.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self
            .tape
            .leaf(self.store.value(id).clone(), self.track_grad);
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Parameter gradients in id order, for every parameter bound on this tape.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self.bound.iter().map(|(id, v)| (*id, grads.get(*v))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        let g = self.tape.backward(loss)?;
        Ok(self.param_grads(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn zero_grads_resets_accumulation() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut sess = Session::new(&s, true);
            let w = sess.param(id);
            let w2 = sess.param(id);
            assert_eq!(w, w2);
            let l = sess.tape.sum(w);
            let g = sess.backward(l).unwrap();
            s.accumulate(&g, 1.0);
        }
        assert_eq!(s.grad(id).data(), &[2.0, 2.0]);
        s.zero_grads();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }
}
