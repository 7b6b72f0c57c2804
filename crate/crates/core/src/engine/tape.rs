//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value, the ids of its inputs
//! and (when any input needs a gradient) a closure computing the
//! vector-Jacobian product. Inputs always precede outputs on the tape, so a
//! single reverse sweep visits nodes in a valid topological order.

use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one op.
///
/// Called with the upstream gradient, the input values, the output value and a
/// mask telling which inputs need a gradient. Returns one entry per input;
/// entries whose mask bit is false may be `None`.
pub(crate) type BackwardFn<T> = Box<
    dyn Fn(&Tensor5<T>, &[&Tensor5<T>], &Tensor5<T>, &[bool]) -> Vec<Option<Tensor5<T>>>
        + Send
        + Sync,
>;

struct Node<T> {
    value: Tensor5<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Running hash of the branches taken by piecewise ops.
    branches: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Hash of every branch decision (ReLU sign, Huber regime, warp cell)
    /// made while recording. Two evaluations with equal signatures lie on
    /// the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    pub(crate) fn record_branches(&mut self, bits: impl IntoIterator<Item = u64>) {
        for b in bits {
            self.branches = (self.branches ^ b).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only produced for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor5<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor5<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor5<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor5<T>,
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    ) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.shape().is_scalar() {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor5<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor5::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor5<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = backward(&upstream, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((var, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                assert!(var.0 < i, "tape cycle");
                let (true, Some(g)) = (need, g) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[var.0].value.shape());
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        // Only leaf gradients are kept; interior ones were consumed above.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor5<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor5<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor5<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
