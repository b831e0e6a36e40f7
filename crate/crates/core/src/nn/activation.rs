use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// `max(0, x)`; the subgradient at 0 is 0.
pub fn relu<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let y = tape.data(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    tape.push(tape.shape(x), y, &[x], ReluBackward)
}

struct ReluBackward;

impl<T: Element> Backward<T> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let dx = ctx
            .grad_output
            .iter()
            .zip(ctx.output)
            .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
            .collect();
        vec![Some(dx)]
    }
}

pub fn sigmoid<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let y = tape.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
    tape.push(tape.shape(x), y, &[x], SigmoidBackward)
}

fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

struct SigmoidBackward;

impl<T: Element> Backward<T> for SigmoidBackward {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let dx = ctx.grad_output.iter().zip(ctx.output).map(|(&d, &y)| d * y * (T::one() - y)).collect();
        vec![Some(dx)]
    }
}

/// Softmax across the channel axis, independently for every `(n, h, w)`.
pub fn softmax_channels<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let [n, c, h, w] = shape.0;
    if c == 0 {
        return Err(Error::shape("softmax over zero channels"));
    }
    let plane = h * w;
    let xd = tape.data(x);
    let mut y = vec![T::zero(); shape.numel()];
    let mut buf = vec![T::zero(); c];
    for s in 0..n {
        let base = s * c * plane;
        for px in 0..plane {
            let at = |ch: usize| base + ch * plane + px;
            let max = (0..c).map(|ch| xd[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (ch, b) in buf.iter_mut().enumerate() {
                *b = (xd[at(ch)] - max).exp();
                total = total + *b;
            }
            for (ch, &b) in buf.iter().enumerate() {
                y[at(ch)] = b / total;
            }
        }
    }
    Ok(tape.push(shape, y, &[x], SoftmaxBackward))
}

struct SoftmaxBackward;

impl<T: Element> Backward<T> for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = ctx.output_shape.0;
        let plane = h * w;
        let (y, dy) = (ctx.output, ctx.grad_output);
        let mut dx = vec![T::zero(); y.len()];
        for s in 0..n {
            let base = s * c * plane;
            for px in 0..plane {
                let at = |ch: usize| base + ch * plane + px;
                let dot: T = (0..c).map(|ch| y[at(ch)] * dy[at(ch)]).sum();
                for ch in 0..c {
                    dx[at(ch)] = y[at(ch)] * (dy[at(ch)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros([1, 1, 1, 1]));
        let y = sigmoid(&mut tape, x);
        assert_eq!(tape.data(y), &[0.5]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f32>::from_buffer([1, 1, 1, 2], vec![-1000.0, 1000.0]).unwrap());
        let y = sigmoid(&mut tape, x);
        assert_eq!(tape.data(y), &[0.0, 1.0]);
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::from_buffer([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap().with_requires_grad(true));
        let y = relu(&mut tape, x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros([1, 3, 1, 1]));
        let y = softmax_channels(&mut tape, x).unwrap();
        for &p in tape.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let vals: Vec<f32> = (0..2 * 4 * 3 * 3).map(|i| ((i * 7919) % 23) as f32 - 11.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_buffer([2, 4, 3, 3], vals).unwrap());
        let y = softmax_channels(&mut tape, x).unwrap();
        let y = tape.value(y);
        for s in 0..2 {
            for px in 0..9 {
                let total: f32 = (0..4).map(|c| y.get(s, c, px / 3, px % 3)).sum();
                assert!((total - 1.0).abs() <= 1e-6);
                assert!((0..4).all(|c| {
                    let p = y.get(s, c, px / 3, px % 3);
                    p > 0.0 && p < 1.0
                }));
            }
        }
    }
}
