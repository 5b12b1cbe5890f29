//! Wengert-style tape: every differentiable operation appends a node holding
//! its output value and whatever the backward rule needs. `backward` replays
//! the tape in reverse, visiting each node once.

use super::ops::{self, Op};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward state. Trainable parameters enter
    /// as constants, so `backward` on it populates nothing.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push_raw(value, requires_grad, Op::Leaf(None))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape; it tracks gradient iff it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let requires_grad = p.trainable && self.grad_enabled;
        self.push_raw(p.value.clone(), requires_grad, Op::Leaf(Some(id)))
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op output. Backward state is dropped when no operand tracks gradient.
    pub(crate) fn push(&mut self, value: Tensor, operands: &[Var], op: Op) -> Var {
        let requires_grad = self.grad_enabled && operands.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf(None) };
        self.push_raw(value, requires_grad, op)
    }

    /// Reverse pass from a scalar `loss`. Gradients of trainable parameters are
    /// added to their buffers in `store` (accumulating until `zero_grad`); the
    /// returned [`Gradients`] exposes the gradient of every tracked node.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            match &node.op {
                Op::Leaf(Some(id)) => store.accumulate_grad(*id, g),
                Op::Leaf(None) => {}
                op => ops::backward(op, &node.value, g, &self.nodes, lower),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(tape.value(v).shape(), g.clone()).expect("grad shape"))
    }
}

/// Mutable access to an operand's gradient buffer, allocating zeros on first use.
pub(crate) fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}
