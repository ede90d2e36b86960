//! Reverse-mode differentiation over a single-writer tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and, when
//! any input participates in differentiation, the information needed to
//! propagate gradients back. [`Tape::backward`] walks the nodes once, in
//! reverse order of creation.

mod backward;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::kernels::{ConvGeom, TConvGeom};
use crate::tensor::{Real, Tensor};

pub type NodeId = usize;

/// Deliberate gradient bugs for mutation-testing the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SoftmaxGradSign,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    MatMul(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        index: Vec<usize>,
    },
    ScatterMean {
        x: NodeId,
        index: Vec<usize>,
        counts: Vec<usize>,
    },
    DepthwiseConv {
        x: NodeId,
        k: NodeId,
        geom: ConvGeom,
    },
    TransposedConv {
        x: NodeId,
        k: NodeId,
        geom: TConvGeom,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool(NodeId),
    Resize(NodeId),
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, NodeId>>,
    macs: Cell<u64>,
    masked_rows: Cell<u64>,
    fault: Cell<Option<Fault>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            macs: Cell::new(0),
            masked_rows: Cell::new(0),
            fault: Cell::new(None),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers a named parameter once per tape. Frozen parameters enter as
    /// constants, so backward never allocates a gradient for them.
    pub fn param(&self, store: &ParameterStore<T>, name: &str) -> Result<Var<'_, T>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let var = self.push_raw(value, Op::Leaf, !store.is_frozen(name));
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate operations executed by forward kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Softmax rows that were fully masked and replaced by a uniform row.
    pub fn fully_masked_rows(&self) -> u64 {
        self.masked_rows.get()
    }

    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.fault.set(fault);
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Appends the result of an operation; the backward record is dropped
    /// when no input needs a gradient.
    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Var<'_, T> {
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        if rg {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        }
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in backward::propagate(&nodes, id, &g, fault)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let params = self.params.borrow();
        let mut named = BTreeMap::new();
        for (name, &id) in params.iter() {
            if !nodes[id].requires_grad {
                continue;
            }
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape()));
            named.insert(name.clone(), g);
        }
        Ok(Gradients {
            by_node: grads,
            named,
        })
    }
}

/// Result of [`Tape::backward`]: gradients of named parameters plus any
/// other differentiable leaves.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    named: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(v.id).and_then(Option::as_ref)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// The same value with no gradient path.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }
}
