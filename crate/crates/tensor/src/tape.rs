use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::grad;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    SumAxis(NodeId, usize),
    Clamp(NodeId, T, T),
    Gather(NodeId, Rc<[usize]>),
    MaxAxis(NodeId, Vec<usize>),
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        cols: Option<Vec<T>>,
    },
    AvgPool(NodeId, usize),
    Reshape(NodeId),
    Softmax(NodeId),
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub tracked: bool,
}

/// Append-only record of primitive applications. Nodes are pushed in
/// evaluation order, so every input precedes its consumer.
///
/// A tape is single-owner; build one per forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A differentiable input; `backward` reports its gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// An input treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes that participate in backward.
    pub fn tracked_len(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| n.tracked).count()
    }

    pub(crate) fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        let op = if tracked { op } else { Op::Constant };
        nodes.push(Node { value, op, tracked });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: NodeId) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub(crate) fn tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].tracked
    }

    /// Reverse sweep from a scalar `loss`, visiting each node once in
    /// reverse insertion order.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if root.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; loss.id.0 + 1];
        let mut leaves = HashMap::new();
        if root.tracked {
            slots[loss.id.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        }
        for i in (0..=loss.id.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaves.insert(NodeId(i), g);
                continue;
            }
            grad::propagate(&nodes, node, g, &mut slots);
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.leaves
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        self.leaves
            .remove(&var.id)
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(&id)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let value = self.value();
        self.tape.push(value, Op::Constant, false)
    }

    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward(*self)
    }
}
