//! Named parameter storage shared by the model, optimizer, and checkpoints.
//!
//! Trainable weights carry gradient and momentum buffers of the same shape;
//! batch-norm running statistics are registered as buffers so they travel in
//! checkpoints without being counted as parameters or touched by the
//! optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight: has grad and momentum buffers.
    Weight,
    /// Persistent state (running statistics): checkpointed, not optimized.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub momentum: Vec<T>,
}

/// Registration-ordered parameter set with unique names.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        let numel = value.numel();
        let (grad, momentum) = match kind {
            ParamKind::Weight => (vec![T::ZERO; numel], vec![T::ZERO; numel]),
            ParamKind::Buffer => (Vec::new(), Vec::new()),
        };
        let idx = self.entries.len();
        self.entries.push(Parameter {
            name: name.to_string(),
            kind,
            value,
            grad,
            momentum,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalars (buffers excluded).
    pub fn num_weight_scalars(&self) -> u64 {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::ZERO);
        }
    }
}

/// Whether a forward pass records gradients and updates running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus the bindings of store parameters onto it.
///
/// Parameters are bound lazily, once each; after `backward` the accumulated
/// tape gradients flow back into the store via [`Session::collect_grads`].
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<TensorId>>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let bound = vec![None; store.len()];
        Session {
            tape: Tape::new(),
            store,
            bound,
            mode,
        }
    }

    /// Bind a parameter's value onto the tape (memoized per session).
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let p = &self.store.entries[id.0];
        let mut value = p.value.clone();
        value.requires_grad = self.mode == Mode::Train && p.kind == ParamKind::Weight;
        let t = self.tape.leaf(value);
        self.bound[id.0] = Some(t);
        t
    }

    /// Record a non-parameter input.
    pub fn input(&mut self, t: Tensor<T>) -> TensorId {
        self.tape.leaf(t)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Read a buffer's data (running statistics).
    pub fn buffer(&self, id: ParamId) -> &[T] {
        self.store.entries[id.0].value.data()
    }

    /// Overwrite a buffer (running-statistic update).
    pub fn update_buffer(&mut self, id: ParamId, f: impl FnOnce(&mut [T])) {
        f(self.store.entries[id.0].value.data_mut());
    }

    /// Accumulate tape gradients of all bound weights back into the store.
    pub fn collect_grads(&mut self) {
        for (idx, bound) in self.bound.iter().enumerate() {
            let Some(tid) = bound else { continue };
            if self.store.entries[idx].kind != ParamKind::Weight {
                continue;
            }
            if let Some(g) = self.tape.grad(*tid) {
                let dst = &mut self.store.entries[idx].grad;
                for (d, &s) in dst.iter_mut().zip(g.iter()) {
                    *d += s;
                }
            }
        }
    }
}
