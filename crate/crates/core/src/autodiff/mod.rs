//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every differentiable operation as it executes. Calling
//! [`Graph::backward`] on a scalar walks the record in exact reverse order and
//! accumulates gradients into every node that requires them. The graph is
//! meant to be dropped after one backward pass.

mod conv;
mod norm;
mod ops;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

pub use conv::{conv2d_output_extent, ConvSpec};
pub use norm::{BatchStats, BnMode, BN_EPS};
pub use ops::{softmax_last_axis, weighted_scalar_sum, PROB_FLOOR};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
pub trait Function<T: Real> {
    fn name(&self) -> &'static str;

    /// Maps the output gradient to one gradient per input (`None` when the
    /// input does not need one).
    fn backward(
        &self,
        grad_out: &[T],
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    func: Option<Box<dyn Function<T>>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    /// Present only when discrete decisions are being fingerprinted.
    branches: Option<DefaultHasher>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            branches: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            func: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a node's value into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation output. Non-finite outputs are rejected with the
    /// operation's name.
    pub fn push<F: Function<T> + 'static>(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        func: F,
    ) -> Result<Var> {
        value.ensure_finite(func.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            func: requires_grad.then(|| Box::new(func) as Box<dyn Function<T>>),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A graph that fingerprints every discrete forward-pass decision, for
    /// finite-difference checks that must not step across a kink.
    pub fn with_branch_tracking() -> Self {
        Graph {
            branches: Some(DefaultHasher::new()),
            ..Self::new()
        }
    }

    /// Folds a discrete forward-pass decision (ReLU masks, hinge activity,
    /// pivot choices) into the branch signature, when tracking is on.
    pub fn record_branch<H: Hash + ?Sized>(&mut self, decision: &H) {
        if let Some(h) = self.branches.as_mut() {
            decision.hash(h);
        }
    }

    /// Identifies the piecewise-smooth region the recorded forward pass lies
    /// in. Two passes with equal signatures took identical discrete branches.
    /// `None` unless the graph was built with branch tracking.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(|h| h.finish())
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        loss_node.value.ensure_finite("loss")?;

        self.grads = vec![None; self.nodes.len()];
        if !loss_node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(func) = &node.func {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&i| self.nodes[i].requires_grad)
                    .collect();
                let input_grads = func.backward(&grad_out, &inputs, &node.value, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (&src, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[src].requires_grad {
                        continue;
                    }
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric {
                            op: format!("{} (backward)", func.name()),
                        });
                    }
                    match &mut self.grads[src] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            // Leaves keep their gradient; interior buffers are released.
            if node.func.is_none() {
                self.grads[idx] = Some(grad_out);
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass. Leaves that require a gradient but
    /// were not reached get zeros; nodes that never require one get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::new(shape, g.clone()).expect("grad shape matches value")),
            None => Some(Tensor::zeros(&shape)),
        }
    }
}
