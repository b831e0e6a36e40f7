//! Reconstruction and segmentation losses, each a single fused tape op.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Log-probability floor for cross-entropy.
pub const CE_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    CrossEntropy,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "cross_entropy" | "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

/// `(1/n) Σ (target - pred)²` over all elements.
pub fn mse_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let shape = tape.shape(pred);
    shape.expect_eq(&target.shape(), "mse_loss pred vs target")?;
    if shape.numel() == 0 {
        return Err(Error::shape("mse_loss on an empty tensor"));
    }
    let t = tape.constant(target);
    let n = T::from_f64(shape.numel() as f64);
    let total: T = tape.data(pred).iter().zip(tape.data(t)).map(|(&p, &y)| (y - p) * (y - p)).sum();
    Ok(tape.push(Shape::SCALAR, vec![total / n], &[pred, t], MseBackward))
}

struct MseBackward;

impl<T: Element> Backward<T> for MseBackward {
    fn name(&self) -> &'static str {
        "mse_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (p, y) = (ctx.inputs[0], ctx.inputs[1]);
        let k = ctx.grad_output[0] * T::from_f64(2.0 / p.len() as f64);
        vec![Some(p.iter().zip(y).map(|(&p, &y)| k * (p - y)).collect()), None]
    }
}

/// Checks that `target` is one-hot over the channel axis and has the shape of `probs`.
pub fn validate_one_hot<T: Element>(probs: Shape, target: &Tensor<T>) -> Result<()> {
    probs.expect_eq(&target.shape(), "probabilities vs one-hot target")?;
    let [n, c, h, w] = probs.0;
    let plane = h * w;
    let d = target.data();
    for s in 0..n {
        for px in 0..plane {
            let mut ones = 0;
            for ch in 0..c {
                let v = d[(s * c + ch) * plane + px];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(Error::contract(format!(
                        "target is not one-hot: value {v} at sample {s}, channel {ch}, pixel {px}"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::contract(format!(
                    "target is not one-hot: {ones} active classes at sample {s}, pixel {px}"
                )));
            }
        }
    }
    Ok(())
}

/// Multi-class soft Dice loss.
///
/// Per class `c`, with sums over every pixel of the batch:
/// `DSC_c = (2 Σ p g + s) / (Σ p² + Σ g² + s)`, and the loss is
/// `1 - mean_c DSC_c` over the included classes. With the smoothing term a
/// class absent from both prediction and target scores `DSC ≈ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceLoss {
    pub smooth: f64,
    /// Classes left out of the mean.
    #[serde(default)]
    pub excluded: Vec<usize>,
}

impl Default for DiceLoss {
    fn default() -> Self {
        DiceLoss { smooth: 1e-6, excluded: Vec::new() }
    }
}

impl DiceLoss {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = tape.shape(probs);
        validate_one_hot(shape, target)?;
        let [n, c, h, w] = shape.0;
        let included: Vec<usize> = (0..c).filter(|k| !self.excluded.contains(k)).collect();
        if included.is_empty() {
            return Err(Error::Config("dice loss excludes every class".into()));
        }
        let plane = h * w;
        let t = tape.constant(target);
        let (p, g) = (tape.data(probs), tape.data(t));

        let mut inter = vec![T::zero(); c];
        let mut denom = vec![T::from_f64(self.smooth); c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for (&pv, &gv) in p[off..off + plane].iter().zip(&g[off..off + plane]) {
                    inter[ch] = inter[ch] + pv * gv;
                    denom[ch] = denom[ch] + pv * pv + gv * gv;
                }
            }
        }
        let smooth = T::from_f64(self.smooth);
        let two = T::from_f64(2.0);
        let mean_dsc = included.iter().map(|&k| (two * inter[k] + smooth) / denom[k]).sum::<T>()
            / T::from_f64(included.len() as f64);
        let op = DiceBackward { inter, denom, smooth, included };
        Ok(tape.push(Shape::SCALAR, vec![T::one() - mean_dsc], &[probs, t], op))
    }
}

pub fn dice_loss<T: Element>(tape: &mut Tape<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    DiceLoss::default().forward(tape, probs, target)
}

struct DiceBackward<T> {
    inter: Vec<T>,
    denom: Vec<T>,
    smooth: T,
    included: Vec<usize>,
}

impl<T: Element> Backward<T> for DiceBackward<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        // dL/dp = -(1/K) [2 g D - (2 I + s) 2 p] / D²
        let [n, c, h, w] = ctx.input_shapes[0].0;
        let plane = h * w;
        let (p, g) = (ctx.inputs[0], ctx.inputs[1]);
        let two = T::from_f64(2.0);
        let scale = -ctx.grad_output[0] / T::from_f64(self.included.len() as f64);
        let mut dp = vec![T::zero(); p.len()];
        for &k in &self.included {
            let d = self.denom[k];
            let num = two * self.inter[k] + self.smooth;
            let (a, b) = (scale * two / d, scale * two * num / (d * d));
            for s in 0..n {
                let off = (s * c + k) * plane;
                for ((o, &pv), &gv) in dp[off..off + plane].iter_mut().zip(&p[off..off + plane]).zip(&g[off..off + plane]) {
                    *o = a * gv - b * pv;
                }
            }
        }
        vec![Some(dp), None]
    }
}

/// `-(1 / (n h w)) Σ log max(p_true, 1e-12)`.
pub fn cross_entropy_loss<T: Element>(tape: &mut Tape<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    let shape = tape.shape(probs);
    validate_one_hot(shape, target)?;
    let pixels = shape.n() * shape.plane();
    if pixels == 0 {
        return Err(Error::shape("cross_entropy_loss on an empty tensor"));
    }
    let t = tape.constant(target);
    let floor = T::from_f64(CE_PROB_FLOOR);
    let total: T = tape
        .data(probs)
        .iter()
        .zip(tape.data(t))
        .filter(|(_, &g)| g == T::one())
        .map(|(&p, _)| p.max(floor).ln())
        .sum();
    let loss = -total / T::from_f64(pixels as f64);
    Ok(tape.push(Shape::SCALAR, vec![loss], &[probs, t], CrossEntropyBackward { pixels }))
}

struct CrossEntropyBackward {
    pixels: usize,
}

impl<T: Element> Backward<T> for CrossEntropyBackward {
    fn name(&self) -> &'static str {
        "cross_entropy_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let floor = T::from_f64(CE_PROB_FLOOR);
        let k = -ctx.grad_output[0] / T::from_f64(self.pixels as f64);
        let dp = ctx.inputs[0]
            .iter()
            .zip(ctx.inputs[1])
            .map(|(&p, &g)| if g == T::one() && p > floor { k / p } else { T::zero() })
            .collect();
        vec![Some(dp), None]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.data(v)[0]
    }

    fn one_hot(classes: &[usize], nc: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros([1, nc, h, w]);
        for (px, &k) in classes.iter().enumerate() {
            t.data_mut()[k * h * w + px] = 1.0;
        }
        t
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::new();
        let t = Tensor::from_buffer([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let p = tape.leaf(&Tensor::zeros([1, 1, 1, 2]));
        let l = mse_loss(&mut tape, p, &t).unwrap();
        assert_eq!(scalar(&tape, l), 5.0);
        let p2 = tape.leaf(&t);
        let l2 = mse_loss(&mut tape, p2, &t).unwrap();
        assert_eq!(scalar(&tape, l2), 0.0);
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut tape = Tape::new();
        let t = Tensor::from_buffer([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let p = tape.leaf(&Tensor::from_buffer([1, 1, 1, 2], vec![2.0, 2.0]).unwrap().with_requires_grad(true));
        let l = mse_loss(&mut tape, p, &t).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn dice_perfect_prediction_is_zero() {
        let target = one_hot(&[0, 1, 2, 1], 3, 2, 2);
        let mut tape = Tape::new();
        let p = tape.leaf(&target);
        let l = dice_loss(&mut tape, p, &target).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-9);
    }

    #[test]
    fn dice_uniform_two_class() {
        let n = 64;
        let target = one_hot(&vec![0; n], 2, 8, 8);
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::full([1, 2, 8, 8], 0.5));
        let l = DiceLoss { smooth: 0.0, excluded: vec![] }.forward(&mut tape, p, &target).unwrap();
        assert!((scalar(&tape, l) - 0.6).abs() < 1e-12);
        let l = dice_loss(&mut tape, p, &target).unwrap();
        assert!((scalar(&tape, l) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn dice_exclusion_changes_mean() {
        let target = one_hot(&[0, 0, 0, 0], 2, 2, 2);
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::full([1, 2, 2, 2], 0.5));
        let only0 = DiceLoss { smooth: 0.0, excluded: vec![1] }.forward(&mut tape, p, &target).unwrap();
        assert!((scalar(&tape, only0) - 0.2).abs() < 1e-12);
        assert!(DiceLoss { smooth: 0.0, excluded: vec![0, 1] }.forward(&mut tape, p, &target).is_err());
    }

    #[test]
    fn rejects_non_one_hot_targets() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::full([1, 2, 1, 2], 0.5));
        let bad = Tensor::from_buffer([1, 2, 1, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(dice_loss(&mut tape, p, &bad), Err(Error::Contract(_))));
        let frac = Tensor::from_buffer([1, 2, 1, 2], vec![0.5, 1.0, 0.5, 0.0]).unwrap();
        assert!(matches!(cross_entropy_loss(&mut tape, p, &frac), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let target = one_hot(&[0, 1, 2, 3], 4, 2, 2);
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::full([1, 4, 2, 2], 0.25));
        let l = cross_entropy_loss(&mut tape, p, &target).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-12);

        let p = tape.leaf(&target);
        let l = cross_entropy_loss(&mut tape, p, &target).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_hand_sum() {
        let probs = vec![0.7, 0.1, 0.5, 0.2, 0.3, 0.9, 0.5, 0.8];
        let target = one_hot(&[0, 1, 1, 0], 2, 2, 2);
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::from_buffer([1, 2, 2, 2], probs).unwrap());
        let l = cross_entropy_loss(&mut tape, p, &target).unwrap();
        let expect = -(0.7f64.ln() + 0.9f64.ln() + 0.5f64.ln() + 0.2f64.ln()) / 4.0;
        assert!((scalar(&tape, l) - expect).abs() < 1e-15);
    }
}
