//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! ever appended after their inputs, so the node order is a topological
//! order and backward is a single reverse sweep. A tape is built for one
//! forward pass and dropped after its gradients have been read.

mod conv;
mod elementwise;
mod layers;
mod reduce;

pub use conv::{conv2d_output_size, Padding};
pub use elementwise::BinaryOp;
pub use elementwise::UnaryOp;
pub(crate) use elementwise::sigmoid as sigmoid_value;
pub use layers::BatchStats;
pub use reduce::ReduceOp;


use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `backward` receives the values of the inputs, the output value, and the
/// gradient flowing into the output. It returns one entry per input; entries
/// for inputs whose `needs` flag is false may be `None`.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Float>>>,
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

    /// Adds an input tensor. Leaves that require grad receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite("leaf", value.data())?;
        Ok(self.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        }))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records the result of an operation. The backward rule is kept only
    /// when some input requires grad.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        op: impl Backward + 'static,
    ) -> Result<Var> {
        ensure_finite(op.name(), value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                requires_grad,
                inputs: inputs.to_vec(),
                op: Some(Box::new(op)),
            }
        } else {
            Node {
                value,
                requires_grad,
                inputs: Vec::new(),
                op: None,
            }
        };
        Ok(self.push(node))
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`, or `"leaf"`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.as_ref().map_or("leaf", |op| op.name())
    }

    /// Gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.grads[v.0].as_deref()
    }

    /// Backpropagates from a scalar. Gradients from previous passes are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 || !node.requires_grad {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad_out) = self.grads[idx].take() else { continue };

            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad_out, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());

            let targets = node.inputs.clone();
            self.grads[idx] = Some(grad_out);
            for ((target, g), need) in targets.into_iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[target.0].value.numel());
                match &mut self.grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true).unwrap();
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0])).unwrap();
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
        assert_eq!(tape.op_name(b), "leaf");
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(exp(x)) + sum(3x); dy/dx = exp(x) + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.5, -1.0]), true).unwrap();
        let e = tape.exp(x).unwrap();
        let s1 = tape.sum_all(e).unwrap();
        let t = tape.scale(x, 3.0).unwrap();
        let s2 = tape.sum_all(t).unwrap();
        let y = tape.add(s1, s2).unwrap();
        tape.backward(y).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], (0.5 as Float).exp() + 3.0);
        assert_eq!(g[1], (-1.0 as Float).exp() + 3.0);
    }
}
