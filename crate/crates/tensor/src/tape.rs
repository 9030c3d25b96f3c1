//! Reverse-mode tape.
//!
//! Every op appends one node holding its forward value and, when any input
//! requires a gradient, a closure mapping the output cotangent to input
//! cotangents. Node ids increase monotonically, so the node vector is already
//! in topological order and the backward sweep is a single reverse scan.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Maps the output cotangent to one optional cotangent per parent.
/// `needs[i]` is false when parent `i` does not require a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    op: &'static str,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Arc<Tensor>>>>>,
    recording: bool,
    backward_done: Cell<bool>,
    macs: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("recording", &self.recording)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            recording: true,
            backward_done: Cell::new(false),
            macs: Cell::new(0),
        }
    }

    /// A tape that only evaluates; nothing requires a gradient.
    pub fn inference() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates performed by forward conv, matmul and DFT ops so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn count_macs(&self, n: usize) {
        self.macs.set(self.macs.get() + n as u64);
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records an input. Gradients are tracked only if `requires_grad` and the tape records.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            requires_grad: requires_grad && self.recording,
            backward: None,
            op: "leaf",
        })
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn push_op<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = self.recording && parents.iter().any(|p| p.requires_grad());
        Ok(self.push_node(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
            op,
        }))
    }

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    ///
    /// A second call without [`Tape::reset_grads`] is a contract error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(TensorError::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        let loss_val = &nodes[loss.id].value;
        if loss_val.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_val.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = rule(&g, &needs)?;
            if parent_grads.len() != node.parents.len() {
                return Err(TensorError::Internal(format!(
                    "{} returned {} grads for {} parents",
                    node.op,
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if p >= id {
                    return Err(TensorError::Internal(format!(
                        "cycle: node {id} ({}) depends on later node {p}",
                        node.op
                    )));
                }
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                if pg.shape() != nodes[p].value.shape() {
                    return Err(TensorError::Internal(format!(
                        "{} produced grad {:?} for parent of shape {:?}",
                        node.op,
                        pg.shape(),
                        nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads.into_iter().map(|g| g.map(Arc::new)).collect());
        self.backward_done.set(true);
        Ok(())
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
        self.backward_done.set(false);
    }

    /// Gradient of the last backward pass w.r.t. `var`, if it was reached.
    pub fn grad(&self, var: Var<'_>) -> Option<Arc<Tensor>> {
        self.grads
            .borrow()
            .as_ref()
            .and_then(|g| g.get(var.id).cloned().flatten())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Arc<Tensor>> {
        self.tape.grad(*self)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf_shared(self.value(), false)
    }
}
