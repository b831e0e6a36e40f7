//! Inputs shared by the benchmarks.

use lapseg_core::{Element, Shape, Tensor};

/// A deterministic, non-degenerate tensor of `shape` with values in
/// `[-1, 1)`.
pub fn probe<T: Element>(shape: impl Into<Shape>, salt: u64) -> Tensor<T> {
    let shape = shape.into();
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..shape.numel())
        .map(|_| {
            // xorshift64*
            state ^= state >> 12;
            state ^= state << 25;
            state ^= state >> 27;
            let r = state.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 11;
            T::from_f64(r as f64 / (1u64 << 52) as f64 - 1.0)
        })
        .collect();
    Tensor::from_buffer(shape, data).expect("buffer matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_is_seeded_and_bounded() {
        let a: Tensor<f32> = probe([2, 3, 4, 5], 1);
        assert_eq!(a, probe([2, 3, 4, 5], 1));
        assert_ne!(a, probe([2, 3, 4, 5], 2));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
