//! Channel-wise (2-D) inverted dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Element;

#[derive(Clone, Debug)]
pub struct DropoutState {
    p: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl DropoutState {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(DropoutState { p, seed, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Restarts the mask stream.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Draws per-`(n, c)` scale factors: `0` for dropped channels,
    /// `1 / (1 - p)` for kept ones.
    pub fn sample_mask<T: Element>(&mut self, n: usize, c: usize) -> Vec<T> {
        let keep = T::from_f64(1.0 / (1.0 - self.p));
        (0..n * c).map(|_| if self.rng.random::<f64>() < self.p { T::zero() } else { keep }).collect()
    }
}

/// Identity in eval mode; in train mode zeroes whole channels.
pub fn dropout2d<T: Element>(tape: &mut Tape<T>, x: Var, state: &mut DropoutState, mode: Mode) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train => {
            let s = tape.shape(x);
            let mask = state.sample_mask(s.n(), s.c());
            dropout2d_with_mask(tape, x, mask)
        }
    }
}

/// Applies a fixed per-`(n, c)` scale mask. Used directly by the gradient
/// auditor so that the mask is frozen across evaluations.
pub fn dropout2d_with_mask<T: Element>(tape: &mut Tape<T>, x: Var, mask: Vec<T>) -> Result<Var> {
    let s = tape.shape(x);
    if mask.len() != s.n() * s.c() {
        return Err(Error::shape(format!("dropout mask of {} entries for input {s:?}", mask.len())));
    }
    let plane = s.plane();
    let y = tape
        .data(x)
        .chunks(plane.max(1))
        .zip(&mask)
        .flat_map(|(ch, &m)| ch.iter().map(move |&v| v * m))
        .collect();
    Ok(tape.push(s, y, &[x], DropoutBackward { mask }))
}

struct DropoutBackward<T> {
    mask: Vec<T>,
}

impl<T: Element> Backward<T> for DropoutBackward<T> {
    fn name(&self) -> &'static str {
        "dropout2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let plane = ctx.output_shape.plane().max(1);
        let dx = ctx
            .grad_output
            .chunks(plane)
            .zip(&self.mask)
            .flat_map(|(ch, &m)| ch.iter().map(move |&d| d * m))
            .collect();
        vec![Some(dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn eval_is_identity() {
        let x = Tensor::<f32>::full([2, 3, 2, 2], 1.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let mut st = DropoutState::new(0.5, 1).unwrap();
        let y = dropout2d(&mut tape, xv, &mut st, Mode::Eval).unwrap();
        assert_eq!(tape.value(y), x);
    }

    #[test]
    fn whole_channels_are_dropped_or_scaled() {
        let x = Tensor::<f64>::full([4, 8, 3, 3], 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let mut st = DropoutState::new(0.5, 9).unwrap();
        let y = dropout2d(&mut tape, xv, &mut st, Mode::Train).unwrap();
        let y = tape.value(y);
        for ch in y.data().chunks(9) {
            assert!(ch.iter().all(|&v| v == 0.0) || ch.iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn drop_fraction_is_near_p() {
        // 10^4 channels; binomial std is 0.005, allow 5 sigma.
        let mut st = DropoutState::new(0.5, 2024).unwrap();
        let mask: Vec<f64> = st.sample_mask(100, 100);
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 1e4;
        assert!((dropped - 0.5).abs() < 0.025, "dropped fraction {dropped}");
    }

    #[test]
    fn reseed_replays_masks() {
        let mut st = DropoutState::new(0.5, 3).unwrap();
        let a: Vec<f32> = st.sample_mask(2, 16);
        st.reseed(3);
        let b: Vec<f32> = st.sample_mask(2, 16);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(DropoutState::new(1.0, 0).is_err());
        assert!(DropoutState::new(-0.1, 0).is_err());
    }
}
