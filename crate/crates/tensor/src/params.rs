//! Named parameter storage and per-tape binding.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Flat, insertion-ordered list of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value: Arc::new(value), trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Dimension {
                op: "ParamStore::set",
                detail: format!("{}: {:?} -> {:?}", p.name, p.value.shape(), value.shape()),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Scalar count of all parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn numel(&self) -> usize {
        self.numel_with_prefix("")
    }
}

/// Lazily records parameters of a store onto a tape the first time a
/// forward pass asks for them, and remembers which ones were touched.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    track_grad: bool,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, track_grad: bool) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            track_grad,
        }
    }

    /// Binder over vars that were already recorded (one per parameter, in order).
    pub fn with_vars(tape: &'t Tape, store: &'s ParamStore, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(TensorError::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Self {
            tape,
            store,
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
            track_grad: true,
        })
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let p = &self.store.params[id.0];
            self.tape.leaf_shared(p.value.clone(), self.track_grad && p.trainable)
        })
    }

    /// Parameters recorded so far.
    pub fn touched(&self) -> Vec<ParamId> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| ParamId(i)))
            .collect()
    }

    /// Scalar count of touched parameters whose name starts with `prefix`.
    pub fn touched_numel_with_prefix(&self, prefix: &str) -> usize {
        self.touched()
            .into_iter()
            .map(|id| self.store.param(id))
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn touched_numel(&self) -> usize {
        self.touched_numel_with_prefix("")
    }

    /// Gradients for touched parameters after `tape.backward`.
    pub fn grads(&self) -> Vec<(ParamId, Arc<Tensor>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| v.grad()).map(|g| (ParamId(i), g)))
            .collect()
    }
}
