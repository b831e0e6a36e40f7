//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] is built dynamically during one forward pass. Every op whose
//! inputs require a gradient is recorded together with a [`Backward`] rule;
//! [`Tape::backward`] replays the records in reverse, summing gradients
//! into inputs that feed more than one consumer.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule can see.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a [T]],
    pub input_shapes: &'a [Shape],
    /// Which inputs need a gradient. Rules may return `None` for the others.
    pub needs: &'a [bool],
    pub output: &'a [T],
    pub output_shape: Shape,
    pub grad_output: &'a [T],
}

/// Analytic derivative of one recorded op.
pub trait Backward<T>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one entry per input, in input order.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T> {
    shape: Shape,
    value: Arc<Vec<T>>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all records so the tape can be reused for a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Records a leaf. Its gradient is reported by [`Tape::backward`] when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape(),
            value: tensor.shared(),
            inputs: Vec::new(),
            op: None,
            requires_grad: tensor.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].requires_grad = false;
        v
    }

    /// Records the result of an op. The backward rule is kept only when
    /// some input requires a gradient.
    pub fn push(
        &mut self,
        shape: Shape,
        data: Vec<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        debug_assert_eq!(shape.numel(), data.len(), "{} produced a mis-sized buffer", op.name());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Arc::new(data),
            inputs: inputs.to_vec(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert!(!self.consumed, "tape used after backward; call reset()");
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Snapshot of a recorded value as a plain tensor.
    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_shared(n.shape, Arc::clone(&n.value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        shape.expect_eq(&self.shape(b), "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(shape, data, &[a, b], AddBackward))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let shape = self.shape(a);
        let data = self.data(a).iter().map(|&x| x * s).collect();
        self.push(shape, data, &[a], MulScalarBackward(s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().sum();
        self.push(Shape::SCALAR, vec![total], &[a], SumBackward)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).numel();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let total: T = self.data(a).iter().copied().sum();
        Ok(self.push(Shape::SCALAR, vec![total / T::from_f64(n as f64)], &[a], MeanBackward))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Consumes the recorded values; a second call without [`Tape::reset`]
    /// is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("backward called twice on the same tape without reset"));
        }
        let loss_shape = self.nodes.get(loss.0).map(|n| n.shape).ok_or_else(|| {
            Error::contract(format!("loss {loss:?} is not recorded on this tape"))
        })?;
        if !loss_shape.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss of shape (1, 1, 1, 1), got {loss_shape:?}"
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad_output) = grads[idx].take() else { continue };

            let inputs: Vec<&[T]> =
                node.inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
            let shapes: Vec<Shape> = node.inputs.iter().map(|v| self.nodes[v.0].shape).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                input_shapes: &shapes,
                needs: &needs,
                output: &node.value,
                output_shape: node.shape,
                grad_output: &grad_output,
            };
            let input_grads = op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());

            for (k, g) in input_grads.into_iter().enumerate() {
                let (Some(g), true) = (g, needs[k]) else { continue };
                debug_assert_eq!(g.len(), shapes[k].numel(), "{} grad size", op.name());
                let input = node.inputs[k];
                match &mut grads[input.0] {
                    slot @ None => *slot = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                }
            }
        }

        // Leaves that require a gradient always get one, zero when unreachable.
        for (idx, node) in self.nodes.iter().enumerate() {
            let is_leaf = node.inputs.is_empty();
            if is_leaf && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![T::zero(); node.shape.numel()]);
            } else if !is_leaf || !node.requires_grad {
                grads[idx] = None;
            }
        }

        self.nodes.iter_mut().for_each(|n| {
            n.value = Arc::new(Vec::new());
            n.op = None;
        });
        self.consumed = true;
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Moves the gradient of `v` into `tensor.grad`, summing with any
    /// gradient already present.
    pub fn accumulate_into(&mut self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        let g = self
            .take(v)
            .ok_or_else(|| Error::contract(format!("no gradient recorded for {v:?}")))?;
        let merged = match tensor.take_grad() {
            Some(mut prev) => {
                prev.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
                prev
            }
            None => g,
        };
        tensor.set_grad(merged)
    }
}

struct AddBackward;

impl<T: Element> Backward<T> for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        ctx.needs.iter().map(|&n| n.then(|| ctx.grad_output.to_vec())).collect()
    }
}

struct MulScalarBackward<T>(T);

impl<T: Element> Backward<T> for MulScalarBackward<T> {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad_output.iter().map(|&g| g * self.0).collect())]
    }
}

struct SumBackward;

impl<T: Element> Backward<T> for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad_output[0]; ctx.input_shapes[0].numel()])]
    }
}

struct MeanBackward;

impl<T: Element> Backward<T> for MeanBackward {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let n = ctx.input_shapes[0].numel();
        let g = ctx.grad_output[0] / T::from_f64(n as f64);
        vec![Some(vec![g; n])]
    }
}
