//! Central-difference gradient auditor.
//!
//! Every backward rule in the crate is validated against
//! `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` in double precision.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose probe interval straddles a kink (the central
    /// differences at `eps` and `eps / 2` disagree beyond `tol`) and draw a
    /// replacement instead. Meant for whole-network audits, where ReLU
    /// pre-activations near zero cannot be avoided by choosing inputs.
    pub kink_guard: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-3, tol: 1e-4, max_coords: None, seed: 0, kink_guard: false }
    }
}

impl GradCheckConfig {
    pub fn sampled(max_coords: usize, seed: u64) -> Self {
        GradCheckConfig { max_coords: Some(max_coords), seed, ..Self::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates dropped by the kink guard.
    pub skipped_kinks: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor so coordinates with vanishing gradient are judged on
/// absolute error.
const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Audits `f`, a scalar function of `x` expressed on the tape.
pub fn grad_check<F>(name: &str, x: &Tensor<f64>, cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with(name, x, cfg, |tape, x| {
        let v = tape.leaf(x);
        Ok((f(tape, v)?, v))
    })
}

/// General form: `f` registers `x` on the tape itself (for instance as a
/// model parameter) and returns `(loss, var_of_x)`.
pub fn grad_check_with<F>(
    name: &str,
    x: &Tensor<f64>,
    cfg: &GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &Tensor<f64>) -> Result<(Var, Var)>,
{
    fn eval<F>(f: &mut F, x: &Tensor<f64>) -> Result<f64>
    where
        F: FnMut(&mut Tape<f64>, &Tensor<f64>) -> Result<(Var, Var)>,
    {
        let mut tape = Tape::new();
        let (loss, _) = f(&mut tape, x)?;
        tape.value(loss).item()
    }

    let base = x.clone().with_requires_grad(false);
    let f0 = eval(&mut f, &base)?;
    let f1 = eval(&mut f, &base)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Audit(format!(
            "{name}: function is not deterministic ({f0:e} vs {f1:e} on identical input)"
        )));
    }

    let analytic = {
        let mut tape = Tape::new();
        let xg = x.clone().with_requires_grad(true);
        let (loss, xv) = f(&mut tape, &xg)?;
        let grads = tape.backward(loss)?;
        grads
            .get(xv)
            .ok_or_else(|| Error::Audit(format!("{name}: no gradient reached the audited input")))?
            .to_vec()
    };

    let n = x.numel();
    let target = cfg.max_coords.unwrap_or(n).min(n);
    let order: Vec<usize> = if target < n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        index::sample(&mut rng, n, n).into_vec()
    } else {
        (0..n).collect()
    };

    let mut probe = base.clone();
    let mut central = |i: usize, eps: f64, f: &mut F| -> Result<f64> {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        Ok((up - down) / (2.0 * eps))
    };
    let mut worst = (0.0f64, order.first().copied().unwrap_or(0));
    let (mut checked, mut skipped) = (0, 0);
    for &i in &order {
        if checked == target {
            break;
        }
        let numeric = central(i, cfg.eps, &mut f)?;
        if cfg.kink_guard {
            let half = central(i, cfg.eps / 2.0, &mut f)?;
            if relative_error(numeric, half) > cfg.tol {
                skipped += 1;
                continue;
            }
        }
        checked += 1;
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }

    let (max_rel_error, worst_index) = worst;
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error,
        worst_index,
        checked,
        skipped_kinks: skipped,
        tol: cfg.tol,
        // A probe set that is mostly kinks says nothing about the gradient.
        passed: max_rel_error <= cfg.tol && checked > 0 && skipped <= checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_on_dyadic_inputs() {
        let x = Tensor::from_buffer([1, 1, 2, 3], vec![1.0, -2.0, 0.5, 4.0, 8.0, -0.25]).unwrap();
        let cfg = GradCheckConfig { eps: 1.0 / 1024.0, ..Default::default() };
        let r = grad_check("sum", &x, &cfg, |tape, v| Ok(tape.sum(v))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn detects_nondeterminism() {
        let x = Tensor::from_buffer([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut calls = 0.0;
        let err = grad_check("noisy", &x, &GradCheckConfig::default(), |tape, v| {
            calls += 1.0;
            let s = tape.sum(v);
            Ok(tape.mul_scalar(s, calls))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Audit(_)));
    }

    #[test]
    fn flags_wrong_gradient() {
        // Analytic path computes 2*sum, evaluation path computes sum.
        let x = Tensor::from_buffer([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let r = grad_check_with("broken", &x, &GradCheckConfig::default(), |tape, x| {
            let v = tape.leaf(x);
            let s = tape.sum(v);
            let k = if x.requires_grad() { 2.0 } else { 1.0 };
            Ok((tape.mul_scalar(s, k), v))
        })
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-9);
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::full([1, 1, 10, 10], 0.5);
        let r = grad_check("mean", &x, &GradCheckConfig::sampled(7, 3), |tape, v| tape.mean(v)).unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.passed);
    }

    #[test]
    fn kink_guard_skips_straddled_coordinates() {
        // relu(x) summed: coordinates within eps of 0 straddle the kink.
        let x = Tensor::from_buffer([1, 1, 1, 4], vec![0.5, 2e-4, -0.7, 1.5]).unwrap();
        let plain = grad_check("relu", &x, &GradCheckConfig::default(), |tape, v| {
            let y = crate::nn::relu(tape, v);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(!plain.passed);
        let cfg = GradCheckConfig { kink_guard: true, ..Default::default() };
        let guarded = grad_check("relu", &x, &cfg, |tape, v| {
            let y = crate::nn::relu(tape, v);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(guarded.passed, "{guarded:?}");
        assert_eq!((guarded.checked, guarded.skipped_kinks), (3, 1));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 2e-12) < 1e-3);
    }
}
