//! The standard gradient audit: every layer op and loss on small random
//! inputs, plus sampled coordinates of a whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport};
use crate::loss::{cross_entropy_loss, dice_loss, mse_loss};
use crate::model::{Model, ModelConfig};
use crate::nn::{batchnorm2d, conv2d, conv_transpose2d, relu, sigmoid, softmax_channels, BatchNormState, ConvGeometry, Mode};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditScope {
    Layer,
    Model,
    All,
}

impl std::str::FromStr for AuditScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(AuditScope::Layer),
            "model" => Ok(AuditScope::Model),
            "all" => Ok(AuditScope::All),
            _ => Err(Error::Config(format!("unknown audit scope {s:?} (layer|model|all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    pub scope: AuditScope,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    /// Encoder widths of the audited network.
    pub model_widths: [usize; 5],
    pub model_input: usize,
    pub model_classes: usize,
    /// Probe step for the network audit; small enough that few probes
    /// straddle a ReLU kink.
    pub model_eps: f64,
    /// Parameters of the network to probe, and coordinates per parameter.
    pub model_params: Vec<String>,
    pub model_coords: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            scope: AuditScope::All,
            seed: 0,
            eps: 1e-3,
            tol: 1e-4,
            model_widths: [64, 128, 256, 512, 1024],
            model_input: 64,
            model_classes: 3,
            model_eps: 1e-4,
            model_params: ["enc1.weight", "enc3.weight", "enc5.weight", "dec2.weight", "dec4.weight", "dec5.weight", "dec5.bias"]
                .map(String::from)
                .to_vec(),
            model_coords: 8,
        }
    }
}

/// Uniform in `±[0.1, 1]`, so ReLU inputs sit away from the kink.
fn signed(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    let shape = shape.into();
    let v = (0..shape.numel())
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_buffer(shape, v).expect("sized buffer")
}

fn probabilities(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let plane = shape.plane();
    let mut v: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(0.1..1.0)).collect();
    for n in 0..shape.n() {
        for p in 0..plane {
            let idx = |c: usize| (n * shape.c() + c) * plane + p;
            let s: f64 = (0..shape.c()).map(|c| v[idx(c)]).sum();
            (0..shape.c()).for_each(|c| v[idx(c)] /= s);
        }
    }
    Tensor::from_buffer(shape, v).expect("sized buffer")
}

fn one_hot(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let plane = shape.plane();
    let mut v = vec![0.0; shape.numel()];
    for n in 0..shape.n() {
        for p in 0..plane {
            v[(n * shape.c() + rng.random_range(0..shape.c())) * plane + p] = 1.0;
        }
    }
    Tensor::from_buffer(shape, v).expect("sized buffer")
}

/// Reduces a tensor-valued op to a scalar through MSE against a fixed
/// random target, so every output coordinate carries a distinct weight.
fn head(tape: &mut Tape<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
    mse_loss(tape, y, target)
}

fn layer_audits(o: &AuditOptions, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut out = Vec::new();

    // convolution: stride 2, padding 1, as in the network
    let g = ConvGeometry::new(4, 2, 1);
    let (x, w, b) = (signed(&mut rng, [2, 3, 6, 6]), signed(&mut rng, [4, 3, 4, 4]), signed(&mut rng, Shape::vector(4)));
    let t = signed(&mut rng, [2, 4, 3, 3]);
    let conv = |xv: &Tensor<f64>, wv: &Tensor<f64>, bv: &Tensor<f64>, which: usize| {
        let t = t.clone();
        let (xv, wv, bv) = (xv.clone(), wv.clone(), bv.clone());
        move |tape: &mut Tape<f64>, v: Var| {
            let leaf = |tape: &mut Tape<f64>, k: usize, t: &Tensor<f64>| if k == which { v } else { tape.constant(t) };
            let (a, b_, c) = (leaf(tape, 0, &xv), leaf(tape, 1, &wv), leaf(tape, 2, &bv));
            let y = conv2d(tape, a, b_, c, g)?;
            head(tape, y, &t)
        }
    };
    out.push(grad_check("conv2d.input", &x, cfg, conv(&x, &w, &b, 0))?);
    out.push(grad_check("conv2d.weight", &w, cfg, conv(&x, &w, &b, 1))?);
    out.push(grad_check("conv2d.bias", &b, cfg, conv(&x, &w, &b, 2))?);

    let (x, w, b) = (signed(&mut rng, [2, 4, 3, 3]), signed(&mut rng, [4, 3, 4, 4]), signed(&mut rng, Shape::vector(3)));
    let t = signed(&mut rng, [2, 3, 6, 6]);
    let convt = |xv: &Tensor<f64>, wv: &Tensor<f64>, bv: &Tensor<f64>, which: usize| {
        let t = t.clone();
        let (xv, wv, bv) = (xv.clone(), wv.clone(), bv.clone());
        move |tape: &mut Tape<f64>, v: Var| {
            let leaf = |tape: &mut Tape<f64>, k: usize, t: &Tensor<f64>| if k == which { v } else { tape.constant(t) };
            let (a, b_, c) = (leaf(tape, 0, &xv), leaf(tape, 1, &wv), leaf(tape, 2, &bv));
            let y = conv_transpose2d(tape, a, b_, c, g)?;
            head(tape, y, &t)
        }
    };
    out.push(grad_check("conv_transpose2d.input", &x, cfg, convt(&x, &w, &b, 0))?);
    out.push(grad_check("conv_transpose2d.weight", &w, cfg, convt(&x, &w, &b, 1))?);
    out.push(grad_check("conv_transpose2d.bias", &b, cfg, convt(&x, &w, &b, 2))?);

    // batch norm, train and eval
    let (x, gamma, beta) = (signed(&mut rng, [2, 3, 2, 2]), signed(&mut rng, Shape::vector(3)), signed(&mut rng, Shape::vector(3)));
    let t = signed(&mut rng, [2, 3, 2, 2]);
    let mut state = BatchNormState::<f64>::new(3);
    state.running_mean = vec![0.2, -0.1, 0.05];
    state.running_var = vec![0.7, 1.3, 0.9];
    for mode in [Mode::Train, Mode::Eval] {
        let tag = match mode {
            Mode::Train => "train",
            Mode::Eval => "eval",
        };
        for (which, (name, audited)) in [("input", &x), ("gamma", &gamma), ("beta", &beta)].into_iter().enumerate() {
            let (xv, gv, bv, t, st) = (x.clone(), gamma.clone(), beta.clone(), t.clone(), state.clone());
            let r = grad_check(&format!("batchnorm2d.{tag}.{name}"), audited, cfg, move |tape, v| {
                let leaf = |tape: &mut Tape<f64>, k: usize, t: &Tensor<f64>| if k == which { v } else { tape.constant(t) };
                let (a, g_, b_) = (leaf(tape, 0, &xv), leaf(tape, 1, &gv), leaf(tape, 2, &bv));
                let mut st = st.clone();
                let y = batchnorm2d(tape, a, g_, b_, &mut st, mode)?;
                head(tape, y, &t)
            })?;
            out.push(r);
        }
    }

    let shape = Shape::new(2, 3, 3, 3);
    let (x, t) = (signed(&mut rng, shape), signed(&mut rng, shape));
    out.push(grad_check("relu", &x, cfg, |tape, v| {
        let y = relu(tape, v);
        head(tape, y, &t)
    })?);
    out.push(grad_check("sigmoid", &x, cfg, |tape, v| {
        let y = sigmoid(tape, v);
        head(tape, y, &t)
    })?);
    out.push(grad_check("softmax_channels", &x, cfg, |tape, v| {
        let y = softmax_channels(tape, v)?;
        head(tape, y, &t)
    })?);

    let pred = probabilities(&mut rng, shape);
    let labels = one_hot(&mut rng, shape);
    let rgb = probabilities(&mut rng, shape);
    out.push(grad_check("mse", &pred, cfg, |tape, v| mse_loss(tape, v, &rgb))?);
    out.push(grad_check("dice", &pred, cfg, |tape, v| dice_loss(tape, v, &labels))?);
    out.push(grad_check("cross_entropy", &pred, cfg, |tape, v| cross_entropy_loss(tape, v, &labels))?);
    Ok(out)
}

fn model_audits(o: &AuditOptions, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x6d6f_6465_6c00);
    let config = ModelConfig::segmentation(o.model_classes).with_widths(o.model_widths).with_seed(o.seed);
    let mut model = Model::<f64>::build(config)?;
    let s = o.model_input;
    let x = signed(&mut rng, [1, 3, s, s]);
    let target = one_hot(&mut rng, Shape::new(1, o.model_classes, s, s));
    let names: Vec<String> = model.param_infos().into_iter().filter(|p| p.learnable).map(|p| p.name).collect();
    let cfg = GradCheckConfig { eps: o.model_eps, kink_guard: true, max_coords: Some(o.model_coords), ..cfg.clone() };
    let mut out = Vec::new();
    for (k, name) in o.model_params.iter().enumerate() {
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("no learnable parameter named {name:?}")))?;
        let p0 = Tensor::from_buffer(
            model.named_tensors().into_iter().find(|t| &t.0 == name).map(|t| t.1).expect("listed above"),
            model.named_tensors().into_iter().find(|t| &t.0 == name).map(|t| t.2.to_vec()).expect("listed above"),
        )?;
        let cfg = GradCheckConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let r = grad_check_with(&format!("model.{name}"), &p0, &cfg, |tape, p| {
            model.set_tensor(name, p.data())?;
            let xv = tape.constant(&x);
            let y = model.forward(tape, xv, Mode::Eval)?;
            let loss = dice_loss(tape, y, &target)?;
            Ok((loss, model.param_vars[idx]))
        });
        model.set_tensor(name, p0.data())?;
        out.push(r?);
    }
    Ok(out)
}

/// Runs the audit selected by `o.scope`.
pub fn audit_suite(o: &AuditOptions) -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig { eps: o.eps, tol: o.tol, max_coords: None, seed: o.seed, kink_guard: false };
    let mut out = Vec::new();
    if matches!(o.scope, AuditScope::Layer | AuditScope::All) {
        out.extend(layer_audits(o, &cfg)?);
    }
    if matches!(o.scope, AuditScope::Model | AuditScope::All) {
        out.extend(model_audits(o, &cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_audit_passes() {
        let reports = audit_suite(&AuditOptions { scope: AuditScope::Layer, ..Default::default() }).unwrap();
        assert_eq!(reports.len(), 6 + 6 + 3 + 3);
        for r in &reports {
            assert!(r.passed, "{r:?}");
            assert_eq!(r.skipped_kinks, 0);
        }
    }

    #[test]
    fn narrow_model_audit_passes() {
        let o = AuditOptions { scope: AuditScope::Model, model_widths: [4, 8, 8, 8, 8], model_coords: 6, ..Default::default() };
        let reports = audit_suite(&o).unwrap();
        assert_eq!(reports.len(), o.model_params.len());
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn unknown_parameter_is_a_config_error() {
        let o = AuditOptions { scope: AuditScope::Model, model_widths: [4, 8, 8, 8, 8], model_params: vec!["enc9.weight".into()], ..Default::default() };
        assert!(matches!(audit_suite(&o), Err(Error::Config(_))));
    }
}
