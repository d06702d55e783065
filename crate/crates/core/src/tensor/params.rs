use super::{Result, Tape, Tensor, TensorError, Var};

/// Stable handle to a named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors. Removing an entry leaves
/// a hole so that the remaining ids stay valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Option<(String, Tensor)>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(Some((name.into(), tensor.with_requires_grad(true))));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        match &self.entries[id.0] {
            Some((_, t)) => t,
            None => panic!("parameter slot {} was removed", id.0),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        match &mut self.entries[id.0] {
            Some((_, t)) => t,
            None => panic!("parameter slot {} was removed", id.0),
        }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.get(id.0).is_some_and(|e| e.is_some())
    }

    pub fn name(&self, id: ParamId) -> Option<&str> {
        self.entries.get(id.0)?.as_ref().map(|(n, _)| n.as_str())
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Tensor> {
        self.entries.get_mut(id.0)?.take().map(|(_, t)| t)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.as_ref().is_some_and(|(n, _)| n == name))
            .map(ParamId)
    }

    /// Number of live entries.
    pub fn len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slots(&self) -> usize {
        self.entries.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|(n, t)| (ParamId(i), n.as_str(), t)))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.iter().map(|(id, _, _)| id).collect()
    }

    /// Copies `grads` into each tensor's gradient slot.
    pub fn attach_grads(&mut self, grads: &Grads) {
        for (i, entry) in self.entries.iter_mut().enumerate() {
            if let Some((_, t)) = entry {
                match grads.slots.get(i).and_then(|g| g.as_ref()) {
                    Some(g) => t.set_grad(g.clone()).expect("gradient shape"),
                    None => t.clear_grad(),
                }
            }
        }
    }
}

/// Gradients aligned with the slots of a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let slots = store
            .entries
            .iter()
            .map(|e| e.as_ref().map(|(_, t)| vec![0.0; t.len()]))
            .collect();
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0)?.as_deref()
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(g);
    }

    /// `self += other`; slots absent in `self` are adopted from `other`.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            match (mine, theirs) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (m @ None, Some(b)) => *m = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots.iter().flatten().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

/// A tape bound to a parameter store. Parameters are placed on the tape the
/// first time they are requested, so unused parameters never participate.
#[derive(Debug)]
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.slots()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters that have been placed on the tape so far.
    pub fn bound_params(&self) -> Vec<ParamId> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| ParamId(i)))
            .collect()
    }

    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        self.tape.backward(loss)?;
        Ok(self.collect_grads())
    }

    /// Reads adjoints of every bound parameter off the tape.
    pub fn collect_grads(&self) -> Grads {
        let mut grads = Grads { slots: vec![None; self.bound.len()] };
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                let g = self
                    .tape
                    .grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.tape.value(*v).len()]);
                grads.slots[i] = Some(g);
            }
        }
        grads
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.tape.value(v);
        if !t.is_scalar() {
            return Err(TensorError::Argument(format!("expected scalar, got {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }
}
