//! Strided and fractionally-strided 2-D convolution.
//!
//! Both ops are cross-correlations (no kernel flip) lowered to GEMM via
//! im2col / col2im. [`direct`] holds the naive loop versions the GEMM
//! path is tested against.
//!
//! Weight layouts follow the usual convention so that the two ops are
//! adjoint for the same weight tensor:
//! - `conv2d`: `(out, in, kh, kw)`
//! - `conv_transpose2d`: `(in, out, kh, kw)`
//!
//! Biases have shape `(1, out, 1, 1)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { kernel: (kernel, kernel), stride, padding }
    }

    /// `floor((h + 2p - k) / s) + 1` per axis.
    pub fn conv_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize| -> Option<usize> {
            let padded = len + 2 * self.padding;
            (self.stride > 0 && padded >= k).then(|| (padded - k) / self.stride + 1)
        };
        match (axis(h, self.kernel.0), axis(w, self.kernel.1)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "convolution {self:?} has no valid output for a {h}x{w} input"
            ))),
        }
    }

    /// `(h - 1) s - 2p + k` per axis.
    pub fn transpose_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize| -> Option<usize> {
            let full = (len.checked_sub(1)?) * self.stride + k;
            full.checked_sub(2 * self.padding).filter(|&v| v >= 1)
        };
        match (axis(h, self.kernel.0), axis(w, self.kernel.1)) {
            (Some(oh), Some(ow)) if self.stride > 0 => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "transpose convolution {self:?} has no valid output for a {h}x{w} input"
            ))),
        }
    }
}

/// im2col for one image: `x` is `(c, h, w)`, the result is
/// `(c*kh*kw, oh*ow)` row-major.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    let mut col = vec![T::zero(); c * kh * kw * p];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((ch * kh + i) * kw + j) * p..][..p];
                for y in 0..oh {
                    let iy = (y * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[y * ow..][..ow];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let ix = (xo * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `(c*kh*kw, oh*ow)` columns back into a
/// `(c, h, w)` image, summing overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(col: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, out: &mut [T]) {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((ch * kh + i) * kw + j) * p..][..p];
                for y in 0..oh {
                    let iy = (y * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[y * ow..][..ow];
                    for (xo, &v) in src.iter().enumerate() {
                        let ix = (xo * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: Shape, out_channels: usize) -> Result<()> {
    if bias != Shape::vector(out_channels) {
        return Err(Error::shape(format!(
            "bias shape {bias:?} does not match {out_channels} output channels"
        )));
    }
    Ok(())
}

/// Output shape of `conv2d` or an error describing the mismatch.
pub fn conv2d_shape(x: Shape, weight: Shape, g: &ConvGeometry) -> Result<Shape> {
    let [n, c, h, w] = x.0;
    let [co, ci, kh, kw] = weight.0;
    if ci != c {
        return Err(Error::shape(format!("conv2d expects {ci} input channels, got {c} (input {x:?})")));
    }
    if (kh, kw) != g.kernel {
        return Err(Error::shape(format!("weight {weight:?} disagrees with kernel {:?}", g.kernel)));
    }
    let (oh, ow) = g.conv_out(h, w)?;
    Ok(Shape::new(n, co, oh, ow))
}

pub fn conv_transpose2d_shape(x: Shape, weight: Shape, g: &ConvGeometry) -> Result<Shape> {
    let [n, c, h, w] = x.0;
    let [ci, co, kh, kw] = weight.0;
    if ci != c {
        return Err(Error::shape(format!(
            "conv_transpose2d expects {ci} input channels, got {c} (input {x:?})"
        )));
    }
    if (kh, kw) != g.kernel {
        return Err(Error::shape(format!("weight {weight:?} disagrees with kernel {:?}", g.kernel)));
    }
    let (oh, ow) = g.transpose_out(h, w)?;
    Ok(Shape::new(n, co, oh, ow))
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], n: usize, plane: usize) {
    let co = bias.len();
    for s in 0..n {
        for (ch, &b) in bias.iter().enumerate() {
            out[(s * co + ch) * plane..][..plane].iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn bias_grad<T: Element>(dy: &[T], n: usize, co: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); co];
    for s in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            *d = *d + dy[(s * co + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    db
}

pub fn conv2d<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var, g: ConvGeometry) -> Result<Var> {
    let xs = tape.shape(x);
    let out = conv2d_shape(xs, tape.shape(weight), &g)?;
    check_bias(tape.shape(bias), out.c())?;
    let data = conv2d_forward(tape.data(x), xs, tape.data(weight), tape.data(bias), out, &g);
    Ok(tape.push(out, data, &[x, weight, bias], Conv2dBackward { g }))
}

fn conv2d_forward<T: Element>(x: &[T], xs: Shape, w: &[T], b: &[T], out: Shape, g: &ConvGeometry) -> Vec<T> {
    let [n, ci, h, wd] = xs.0;
    let [_, co, oh, ow] = out.0;
    let k = ci * g.kernel.0 * g.kernel.1;
    let p = oh * ow;
    let mut y = vec![T::zero(); out.numel()];
    let wm = MatRef::new(w, co, k);
    for s in 0..n {
        let col = im2col(&x[s * ci * h * wd..][..ci * h * wd], ci, h, wd, g, oh, ow);
        gemm(T::one(), wm, MatRef::new(&col, k, p), T::zero(), &mut y[s * co * p..][..co * p]);
    }
    add_bias(&mut y, b, n, p);
    y
}

struct Conv2dBackward {
    g: ConvGeometry,
}

impl<T: Element> Backward<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.g;
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let [n, ci, h, wd] = ctx.input_shapes[0].0;
        let [_, co, oh, ow] = ctx.output_shape.0;
        let k = ci * g.kernel.0 * g.kernel.1;
        let p = oh * ow;
        let dy = ctx.grad_output;

        let mut dx = ctx.needs[0].then(|| vec![T::zero(); n * ci * h * wd]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); co * k]);
        let mut dcol = vec![T::zero(); k * p];
        for s in 0..n {
            let dys = MatRef::new(&dy[s * co * p..][..co * p], co, p);
            if let Some(dw) = dw.as_mut() {
                let col = im2col(&x[s * ci * h * wd..][..ci * h * wd], ci, h, wd, g, oh, ow);
                gemm(T::one(), dys, MatRef::new(&col, k, p).t(), T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(T::one(), MatRef::new(w, co, k).t(), dys, T::zero(), &mut dcol);
                col2im(&dcol, ci, h, wd, g, oh, ow, &mut dx[s * ci * h * wd..][..ci * h * wd]);
            }
        }
        let db = ctx.needs[2].then(|| bias_grad(dy, n, co, p));
        vec![dx, dw, db]
    }
}

pub fn conv_transpose2d<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    g: ConvGeometry,
) -> Result<Var> {
    let xs = tape.shape(x);
    let out = conv_transpose2d_shape(xs, tape.shape(weight), &g)?;
    check_bias(tape.shape(bias), out.c())?;
    let data = conv_transpose2d_forward(tape.data(x), xs, tape.data(weight), tape.data(bias), out, &g);
    Ok(tape.push(out, data, &[x, weight, bias], ConvTranspose2dBackward { g }))
}

fn conv_transpose2d_forward<T: Element>(x: &[T], xs: Shape, w: &[T], b: &[T], out: Shape, g: &ConvGeometry) -> Vec<T> {
    let [n, ci, h, wd] = xs.0;
    let [_, co, oh, ow] = out.0;
    let kc = co * g.kernel.0 * g.kernel.1;
    let p = h * wd;
    let mut y = vec![T::zero(); out.numel()];
    let mut col = vec![T::zero(); kc * p];
    let wm = MatRef::new(w, ci, kc);
    for s in 0..n {
        gemm(T::one(), wm.t(), MatRef::new(&x[s * ci * p..][..ci * p], ci, p), T::zero(), &mut col);
        col2im(&col, co, oh, ow, g, h, wd, &mut y[s * co * oh * ow..][..co * oh * ow]);
    }
    add_bias(&mut y, b, n, oh * ow);
    y
}

struct ConvTranspose2dBackward {
    g: ConvGeometry,
}

impl<T: Element> Backward<T> for ConvTranspose2dBackward {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.g;
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let [n, ci, h, wd] = ctx.input_shapes[0].0;
        let [_, co, oh, ow] = ctx.output_shape.0;
        let kc = co * g.kernel.0 * g.kernel.1;
        let p = h * wd;
        let dy = ctx.grad_output;

        let mut dx = ctx.needs[0].then(|| vec![T::zero(); n * ci * p]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); ci * kc]);
        for s in 0..n {
            let dcol = im2col(&dy[s * co * oh * ow..][..co * oh * ow], co, oh, ow, g, h, wd);
            let dcol = MatRef::new(&dcol, kc, p);
            if let Some(dx) = dx.as_mut() {
                gemm(T::one(), MatRef::new(w, ci, kc), dcol, T::zero(), &mut dx[s * ci * p..][..ci * p]);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(T::one(), MatRef::new(&x[s * ci * p..][..ci * p], ci, p), dcol.t(), T::one(), dw);
            }
        }
        let db = ctx.needs[2].then(|| bias_grad(dy, n, co, oh * ow));
        vec![dx, dw, db]
    }
}

/// Naive loop implementations, the reference the GEMM path must match.
pub mod direct {
    use super::*;

    pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
        let out = conv2d_shape(x.shape(), w.shape(), g)?;
        check_bias(b.shape(), out.c())?;
        let [n, ci, h, wd] = x.shape().0;
        let [_, co, oh, ow] = out.0;
        let (kh, kw) = g.kernel;
        let mut y = Vec::with_capacity(out.numel());
        for s in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + j) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc = acc
                                            + x.get(s, c, iy as usize, ix as usize) * w.get(o, c, i, j);
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
        Tensor::from_buffer(out, y)
    }

    /// Scatter form: every input pixel stamps a weighted kernel onto the output.
    pub fn conv_transpose2d<T: Element>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        g: &ConvGeometry,
    ) -> Result<Tensor<T>> {
        let out = conv_transpose2d_shape(x.shape(), w.shape(), g)?;
        check_bias(b.shape(), out.c())?;
        let [n, ci, h, wd] = x.shape().0;
        let [_, co, oh, ow] = out.0;
        let (kh, kw) = g.kernel;
        let mut y = Tensor::zeros(out);
        let ys = y.data_mut();
        for s in 0..n {
            for o in 0..co {
                let base = (s * co + o) * oh * ow;
                ys[base..base + oh * ow].iter_mut().for_each(|v| *v = b.data()[o]);
                for c in 0..ci {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let xv = x.get(s, c, iy, ix);
                            for i in 0..kh {
                                for j in 0..kw {
                                    let oy = (iy * g.stride + i) as isize - g.padding as isize;
                                    let ox = (ix * g.stride + j) as isize - g.padding as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        let idx = base + oy as usize * ow + ox as usize;
                                        ys[idx] = ys[idx] + xv * w.get(c, o, i, j);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_buffer(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: ConvGeometry) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let y = conv2d(&mut tape, xv, wv, bv, g)?;
        Ok(tape.value(y))
    }

    #[test]
    fn output_size_formulas() {
        let g = ConvGeometry::new(4, 2, 1);
        assert_eq!(g.conv_out(256, 256).unwrap(), (128, 128));
        assert_eq!(g.transpose_out(14, 14).unwrap(), (28, 28));
        let g = ConvGeometry::new(4, 1, 0);
        assert_eq!(g.conv_out(16, 16).unwrap(), (13, 13));
        assert_eq!(g.transpose_out(11, 11).unwrap(), (14, 14));
        assert!(g.conv_out(2, 2).is_err());
    }

    #[test]
    fn first_encoder_layer_shape() {
        let s = conv2d_shape(Shape::new(1, 3, 256, 256), Shape::new(64, 3, 4, 4), &ConvGeometry::new(4, 2, 1));
        assert_eq!(s.unwrap(), Shape::new(1, 64, 128, 128));
        let s = conv_transpose2d_shape(Shape::new(1, 8, 14, 14), Shape::new(8, 5, 4, 4), &ConvGeometry::new(4, 2, 1));
        assert_eq!(s.unwrap(), Shape::new(1, 5, 28, 28));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros([1, 2, 8, 8]);
        let w = Tensor::<f64>::zeros([4, 3, 4, 4]);
        let b = Tensor::<f64>::zeros([1, 4, 1, 1]);
        assert!(matches!(run_conv(&x, &w, &b, ConvGeometry::new(4, 2, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn corner_kernel_shifts_input() {
        // A 4x4 kernel with a single 1 at (3, 3) picks x[oy + 3][ox + 3].
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([1, 1, 7, 7], &mut rng);
        let mut w = Tensor::zeros([1, 1, 4, 4]);
        w.data_mut()[15] = 1.0;
        let b = Tensor::zeros([1, 1, 1, 1]);
        let y = run_conv(&x, &w, &b, ConvGeometry::new(4, 1, 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        for oy in 0..4 {
            for ox in 0..4 {
                assert_eq!(y.get(0, 0, oy, ox), x.get(0, 0, oy + 3, ox + 3));
            }
        }
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeometry::new(4, 2, 1);
        let x = random([2, 2, 6, 6], &mut rng);
        let w = random([3, 2, 4, 4], &mut rng);
        let b = random([1, 3, 1, 1], &mut rng);
        let fast = run_conv(&x, &w, &b, g).unwrap();
        let slow = direct::conv2d(&x, &w, &b, &g).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        let wt = random([2, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&wt), tape.leaf(&b));
        let y = conv_transpose2d(&mut tape, xv, wv, bv, g).unwrap();
        let slow = direct::conv_transpose2d(&x, &wt, &b, &g).unwrap();
        for (a, b) in tape.data(y).iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
