use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Optimized by gradient descent (unless frozen).
    Weight,
    /// State updated outside the optimizer, e.g. batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    kind: ParamKind,
    frozen: bool,
}

/// Named parameter storage shared by every layer of a network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            kind,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn weight(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                format!("`{}` has shape {:?}, got {:?}", entry.name, entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// A weight that is not frozen.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Weight && !e.frozen
    }

    /// Freezes or unfreezes every weight whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copies every parameter whose name exists in `other` with the same shape.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            if let Some(&j) = other.by_name.get(&e.name) {
                if other.entries[j].value.shape() == e.value.shape() {
                    e.value = other.entries[j].value.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Forward-pass context: a fresh tape plus lazily bound parameters.
///
/// Parameters are recorded as leaves the first time a layer asks for them.
/// Only trainable weights require gradients, and only when `record_grads` is set.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    record_grads: bool,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    /// Training mode: batch statistics in batch norm, gradients recorded.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::with_mode(store, true, true)
    }

    /// Inference mode: running statistics, no gradients.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::with_mode(store, false, false)
    }

    pub fn with_mode(store: &'a ParamStore, training: bool, record_grads: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            record_grads,
            updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires = self.record_grads && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), requires);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub(crate) fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    /// Buffer updates (running statistics) produced by this pass.
    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Runs backward from `loss` and collects gradients of every trainable weight
    /// that took part in the pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        let mut grads = Gradients::default();
        for (i, slot) in self.bound.iter().enumerate() {
            let id = ParamId(i);
            if let Some(v) = slot {
                if self.tape.requires_grad(*v) {
                    if let Some(g) = self.tape.grad_tensor(*v) {
                        grads.map.insert(id, g);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.map.insert(id, g);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Applies buffer updates collected during a training pass.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, value) in updates {
        store.set(id, value)?;
    }
    Ok(())
}

/// Finite-difference check of every trainable weight in `store` against the
/// gradients of `f` run in a training context.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)`.
pub fn check_param_grads<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut ctx = Ctx::train(store);
    let out = f(&mut ctx)?;
    let grads = ctx.backward(out)?;
    let probe = |s: &ParamStore| -> Result<f64> {
        let mut c = Ctx::with_mode(s, true, false);
        let out = f(&mut c)?;
        Ok(c.tape.value(out).item())
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.trainable_ids() {
        let zeros = Tensor::zeros(store.get(id).shape().to_vec());
        let analytic = grads.get(id).unwrap_or(&zeros).data().to_vec();
        for (k, a) in analytic.into_iter().enumerate() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = probe(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = probe(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
