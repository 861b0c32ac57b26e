use super::ops::{self, Op};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Ordered record of forward computations. Nodes are appended as they are
/// computed, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_grad(false))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient populated by the last backward pass, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub(crate) fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch(format!(
                "variable {} is not on this tape",
                v.0
            )))
        }
    }

    /// Reverse sweep from a scalar loss with seed gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::DetachedLoss);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Reverse sweep from any node with an explicit upstream gradient.
    pub fn backward_with_seed(&mut self, root: Var, seed: Vec<f64>) -> Result<(), TensorError> {
        if root.0 >= self.nodes.len() || !self.requires_grad(root) {
            return Err(TensorError::DetachedLoss);
        }
        if seed.len() != self.value(root).numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "seed of length {} for node of {} values",
                seed.len(),
                self.value(root).numel()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let contributions = ops::backward(self, idx, &upstream)?;
            for (input, g) in contributions {
                if !self.nodes[input.0].value.requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            if upstream.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFinite("backward"));
            }
            self.nodes[idx].value.grad = Some(upstream);
        }
        Ok(())
    }

    /// Clears gradients left by a previous backward pass.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }
}
