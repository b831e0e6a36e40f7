//! Per-channel batch normalization over `(n, h, w)`.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Element, Shape};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics and hyper-parameters of one batch-norm layer.
/// The learnable `gamma` / `beta` live with the layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(BN_MOMENTUM),
            eps: T::from_f64(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch normalization with learnable per-channel affine `gamma`, `beta`
/// (each of shape `(1, c, 1, 1)`).
///
/// Train mode normalizes by the biased batch variance and folds the batch
/// statistics into the running estimates
/// (`running = (1 - m) running + m batch`, unbiased variance). Eval mode
/// uses the running estimates only.
pub fn batchnorm2d<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Var> {
    let xs = tape.shape(x);
    let [n, c, h, w] = xs.0;
    if c != state.channels() {
        return Err(Error::shape(format!(
            "batchnorm over {} channels got input {xs:?}",
            state.channels()
        )));
    }
    for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
        if tape.shape(v) != Shape::vector(c) {
            return Err(Error::shape(format!("batchnorm {what} has shape {:?}", tape.shape(v))));
        }
    }
    let plane = h * w;
    let count = n * plane;

    let (mean, inv_std) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::DegenerateVariance(format!(
                    "train mode needs at least 2 values per channel, input {xs:?} has {count}"
                )));
            }
            let data = tape.data(x);
            let nf = T::from_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let vals = || (0..n).flat_map(move |s| data[(s * c + ch) * plane..][..plane].iter().copied());
                let m = vals().sum::<T>() / nf;
                let v = vals().map(|x| (x - m) * (x - m)).sum::<T>() / nf;
                mean[ch] = m;
                var[ch] = v;
            }
            let mom = state.momentum;
            let unbias = nf / T::from_f64((count - 1) as f64);
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| (v + state.eps).sqrt().recip()).collect();
            (mean, inv_std)
        }
        Mode::Eval => (
            state.running_mean.clone(),
            state.running_var.iter().map(|&v| (v + state.eps).sqrt().recip()).collect(),
        ),
    };

    let (xd, gd, bd) = (tape.data(x), tape.data(gamma), tape.data(beta));
    let mut y = vec![T::zero(); xs.numel()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for (o, &v) in y[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                *o = g * (v - m) * is + b;
            }
        }
    }
    Ok(tape.push(xs, y, &[x, gamma, beta], BatchNormBackward { mean, inv_std, batch_stats: mode == Mode::Train }))
}

struct BatchNormBackward<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Element> Backward<T> for BatchNormBackward<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = ctx.input_shapes[0].0;
        let plane = h * w;
        let count = T::from_f64((n * plane) as f64);
        let (x, gamma, dy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output);

        // Per-channel sums of dy and dy * xhat.
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let (m, is) = (self.mean[ch], self.inv_std[ch]);
                for (&d, &v) in dy[off..off + plane].iter().zip(&x[off..off + plane]) {
                    sum_dy[ch] = sum_dy[ch] + d;
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + d * (v - m) * is;
                }
            }
        }

        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); n * c * plane];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * plane;
                    let (m, is, g) = (self.mean[ch], self.inv_std[ch], gamma[ch]);
                    let out = dx[off..off + plane].iter_mut().zip(&dy[off..off + plane]).zip(&x[off..off + plane]);
                    if self.batch_stats {
                        let k = g * is / count;
                        for ((o, &d), &v) in out {
                            let xhat = (v - m) * is;
                            *o = k * (count * d - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                        }
                    } else {
                        for ((o, &d), _) in out {
                            *o = d * g * is;
                        }
                    }
                }
            }
            dx
        });
        vec![dx, ctx.needs[1].then_some(sum_dy_xhat), ctx.needs[2].then_some(sum_dy)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(x: &Tensor<f64>, g: f64, b: f64, state: &mut BatchNormState<f64>, mode: Mode) -> Result<Tensor<f64>> {
        let c = x.shape().c();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let gv = tape.leaf(&Tensor::full(Shape::vector(c), g));
        let bv = tape.leaf(&Tensor::full(Shape::vector(c), b));
        let y = batchnorm2d(&mut tape, xv, gv, bv, state, mode)?;
        Ok(tape.value(y))
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::full([2, 1, 3, 3], 4.2);
        let y = run(&x, 1.0, 0.0, &mut BatchNormState::new(1), Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn affine_on_standardized_input() {
        // mean 0, biased variance 1 per channel
        let x = Tensor::from_buffer([1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = run(&x, 2.0, 1.0, &mut BatchNormState::new(1), Mode::Train).unwrap();
        let scale = (1.0 + BN_EPS).sqrt().recip();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - (2.0 * i * scale + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 17) as f64 * 0.3 - 1.0).collect();
        let x = Tensor::from_buffer([2, 3, 4, 4], vals).unwrap();
        let y = run(&x, 1.0, 0.0, &mut BatchNormState::new(3), Mode::Train).unwrap();
        for ch in 0..3 {
            let v: Vec<f64> = (0..2).flat_map(|s| (0..16).map(move |i| (s, i))).map(|(s, i)| y.get(s, ch, i / 4, i % 4)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(m.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn running_stats_update_and_eval_determinism() {
        let x = Tensor::from_buffer([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut st = BatchNormState::new(1);
        run(&x, 1.0, 0.0, &mut st, Mode::Train).unwrap();
        assert!((st.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3
        assert!((st.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(st.running_var[0] >= 0.0);

        let before = st.clone();
        let a = run(&x, 1.0, 0.0, &mut st, Mode::Eval).unwrap();
        let b = run(&x, 1.0, 0.0, &mut st, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(st, before);
    }

    #[test]
    fn single_value_per_channel_is_degenerate() {
        let x = Tensor::full([1, 2, 1, 1], 1.0);
        let err = run(&x, 1.0, 0.0, &mut BatchNormState::new(2), Mode::Train).unwrap_err();
        assert!(matches!(err, Error::DegenerateVariance(_)));
        assert!(run(&x, 1.0, 0.0, &mut BatchNormState::new(2), Mode::Eval).is_ok());
    }
}
