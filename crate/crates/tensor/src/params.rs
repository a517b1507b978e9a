//! Named parameter storage and its binding onto a tape.

use std::cell::RefCell;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(TensorError::Invalid {
                op: "ParamStore::add",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Binds a [`ParamStore`] onto a [`Tape`]: each parameter becomes one leaf,
/// created on first use.
pub struct Session<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t> Session<'t> {
    /// Parameters are gradient leaves.
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters are constants; no backward closures are recorded.
    pub fn inference(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'t Tape, store: &'t ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let var = if self.trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(var);
        var
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients aligned with the store; `None` for parameters that were
    /// unused or unreachable from the output.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| {
                b.and_then(|v| {
                    grads
                        .get(v)
                        .map(|g| Tensor::new(v.value().shape(), g.to_vec()).expect("gradient shape"))
                })
            })
            .collect()
    }
}
