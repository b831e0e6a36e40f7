//! Adam with L2 weight decay folded into the gradient, and the step
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// A parameter handed to the optimizer.
pub struct ParamRef<'a, T> {
    pub name: &'a str,
    pub tensor: &'a mut Tensor<T>,
    /// Whether weight decay applies (conv weights only).
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// One entry per parameter, in the order parameters are passed to
    /// [`AdamState::step`]. Empty until the first step.
    pub moments: Vec<Moments<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One Adam update over `params`; each must carry a gradient.
    pub fn step(&mut self, params: &mut [ParamRef<'_, T>]) -> Result<()> {
        for p in params.iter() {
            if p.tensor.grad().is_none() {
                return Err(Error::Optimizer(format!("parameter '{}' has no gradient", p.name)));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments { m: vec![T::zero(); p.tensor.numel()], v: vec![T::zero(); p.tensor.numel()] })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "state tracks {} parameters, step got {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (p, mo) in params.iter().zip(&self.moments) {
            if mo.m.len() != p.tensor.numel() {
                return Err(Error::Optimizer(format!(
                    "state for '{}' has {} entries, parameter has {}",
                    p.name,
                    mo.m.len(),
                    p.tensor.numel()
                )));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));

        for (p, mo) in params.iter_mut().zip(&mut self.moments) {
            let wd = T::from_f64(if p.decay { c.weight_decay } else { 0.0 });
            let grad = p.tensor.take_grad().expect("checked above");
            let theta = p.tensor.data_mut();
            for (i, g) in grad.into_iter().enumerate() {
                let g = g + wd * theta[i];
                mo.m[i] = b1 * mo.m[i] + one_b1 * g;
                mo.v[i] = b2 * mo.v[i] + one_b2 * g * g;
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr(e) = initial · 0.5^floor(e / period)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub halving_period: u32,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, halving_period: u32) -> Self {
        LrSchedule { initial_lr, halving_period }
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        if self.halving_period == 0 {
            return self.initial_lr;
        }
        self.initial_lr * 0.5f64.powi((epoch / self.halving_period) as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial_lr: 1e-4, halving_period: 10 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(theta: f64, grad: f64) -> Tensor<f64> {
        let mut t = Tensor::full([1, 1, 1, 1], theta);
        t.set_grad(vec![grad]).unwrap();
        t
    }

    fn step_once(cfg: AdamConfig, theta: f64, grad: f64, decay: bool) -> (f64, AdamState<f64>) {
        let mut t = param(theta, grad);
        let mut st = AdamState::new(cfg);
        st.step(&mut [ParamRef { name: "w", tensor: &mut t, decay }]).unwrap();
        (t.data()[0], st)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let (theta, st) = step_once(cfg, 0.3, 1.0, true);
        let expect = 0.3 - 0.01 / (1.0 + 1e-8);
        assert!((theta - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        assert_eq!(step_once(cfg, 0.7, 0.0, true).0, 0.7);
    }

    #[test]
    fn weight_decay_shrinks_parameter() {
        let cfg = AdamConfig::default();
        assert!(step_once(cfg, 1.0, 0.0, true).0 < 1.0);
        // exempt parameters are untouched
        assert_eq!(step_once(cfg, 1.0, 0.0, false).0, 1.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut t = Tensor::<f64>::zeros([1, 1, 1, 2]);
        let mut st = AdamState::new(AdamConfig::default());
        let err = st.step(&mut [ParamRef { name: "w", tensor: &mut t, decay: true }]).unwrap_err();
        assert!(matches!(err, Error::Optimizer(_)));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn step_counter_and_second_moment() {
        let mut t = param(0.0, -2.0);
        let mut st = AdamState::new(AdamConfig::default());
        for k in 1..=3 {
            t.set_grad(vec![-2.0]).unwrap();
            st.step(&mut [ParamRef { name: "w", tensor: &mut t, decay: false }]).unwrap();
            assert_eq!(st.step, k);
            assert!(st.moments[0].v[0] >= 0.0);
        }
        assert!(t.data()[0] > 0.0);
    }

    #[test]
    fn schedule_halves_every_period() {
        let s = LrSchedule::new(1e-4, 10);
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(9), 1e-4);
        assert_eq!(s.lr_at(10), 5e-5);
        assert_eq!(s.lr_at(25), 2.5e-5);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            assert!(s.lr_at(e) <= prev);
            prev = s.lr_at(e);
        }
    }
}
