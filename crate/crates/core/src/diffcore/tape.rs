//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its output value and a backward
//! rule. Nodes are appended after their inputs, so the node index order is a
//! topological order and the reverse sweep visits each node exactly once.

use super::tensor::RealTensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: input values, the node's output value, the
/// incoming gradient, and which inputs actually need a gradient.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a RealTensor>,
    pub output: &'a RealTensor,
    pub grad: &'a RealTensor,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<RealTensor>>>;

struct Node {
    value: RealTensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: RealTensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: RealTensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op output. Non-finite outputs are rejected here so that a
    /// NaN never silently propagates through a training step.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: RealTensor,
        inputs: Vec<Var>,
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        self.nodes.push(Node { value, inputs, requires_grad, backward });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a real scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::InvalidLoss(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<RealTensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(RealTensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let contributions = rule(&ctx);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.shape(), self.nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&RealTensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` is unreachable from the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> RealTensor {
        self.get(v).cloned().unwrap_or_else(|| RealTensor::zeros(tape.shape(v)))
    }
}
