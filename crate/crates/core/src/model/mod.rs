//! The 10-layer encoder-decoder network.
//!
//! Encoder: five 4x4 convolutions (64, 128, 256, 512, 1024 filters) with
//! strides `[2, 2, 2, 2, 1]` and paddings `[1, 1, 1, 1, 0]`, batch norm on
//! all but the first, ReLU throughout. The decoder mirrors it with
//! transpose convolutions; batch norm + ReLU on all but the last, channel
//! dropout on the first three. The last layer emits either a per-pixel
//! softmax over `NC` classes (segmentation) or a 3-channel sigmoid
//! (reconstruction).

mod checkpoint;
mod transfer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormState, ConvGeometry, DropoutState, Mode};
use crate::optim::ParamRef;
use crate::tensor::{Element, Shape, Tensor};

pub use checkpoint::{load, save, Checkpoint, NamedBlob, TrainingMeta, FORMAT_VERSION, MAGIC};
pub use transfer::{transfer_weights, TransferReport};

pub const INIT_SCHEME: &str = "he_normal(std=sqrt(2/(in_channels*kh*kw))), bias=0, gamma=1, beta=0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Reconstruction,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: Head,
    /// Output channels of the segmentation head. Ignored (3) for reconstruction.
    pub num_classes: usize,
    pub in_channels: usize,
    pub encoder_filters: Vec<usize>,
    /// Includes the output layer, whose width must equal the head's output channels.
    pub decoder_filters: Vec<usize>,
    pub kernel: usize,
    pub encoder_strides: Vec<usize>,
    pub decoder_strides: Vec<usize>,
    pub encoder_paddings: Vec<usize>,
    pub decoder_paddings: Vec<usize>,
    pub dropout_p: f64,
    /// Number of leading decoder layers followed by channel dropout.
    pub dropout_layers: usize,
    /// Seeds weight initialization and the dropout streams.
    pub seed: u64,
}

impl ModelConfig {
    pub fn segmentation(num_classes: usize) -> Self {
        Self::with_head(Head::Segmentation, num_classes)
    }

    pub fn reconstruction() -> Self {
        Self::with_head(Head::Reconstruction, 3)
    }

    fn with_head(head: Head, num_classes: usize) -> Self {
        let out = if head == Head::Reconstruction { 3 } else { num_classes };
        ModelConfig {
            head,
            num_classes: out,
            in_channels: 3,
            encoder_filters: vec![64, 128, 256, 512, 1024],
            decoder_filters: vec![512, 256, 128, 64, out],
            kernel: 4,
            encoder_strides: vec![2, 2, 2, 2, 1],
            decoder_strides: vec![1, 2, 2, 2, 2],
            encoder_paddings: vec![1, 1, 1, 1, 0],
            decoder_paddings: vec![0, 1, 1, 1, 1],
            dropout_p: 0.5,
            dropout_layers: 3,
            seed: 0,
        }
    }

    /// Same geometry with every hidden width replaced. Handy for fast tests.
    pub fn with_widths(mut self, encoder: [usize; 5]) -> Self {
        self.encoder_filters = encoder.to_vec();
        self.decoder_filters = vec![encoder[3], encoder[2], encoder[1], encoder[0], self.out_channels()];
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn out_channels(&self) -> usize {
        match self.head {
            Head::Reconstruction => 3,
            Head::Segmentation => self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.head == Head::Segmentation && self.num_classes < 2 {
            return bad(format!("segmentation needs at least 2 classes, got {}", self.num_classes));
        }
        if self.head == Head::Reconstruction && self.num_classes != 3 {
            return bad(format!("reconstruction head has 3 outputs, config says {}", self.num_classes));
        }
        let depth = self.encoder_filters.len();
        for (name, len) in [
            ("decoder_filters", self.decoder_filters.len()),
            ("encoder_strides", self.encoder_strides.len()),
            ("decoder_strides", self.decoder_strides.len()),
            ("encoder_paddings", self.encoder_paddings.len()),
            ("decoder_paddings", self.decoder_paddings.len()),
        ] {
            if len != depth {
                return bad(format!("{name} has {len} entries, encoder has {depth}"));
            }
        }
        if depth < 2 || self.kernel == 0 || self.in_channels == 0 {
            return bad("network needs at least two layers per side and a positive kernel".into());
        }
        if self.encoder_filters.iter().chain(&self.decoder_filters).any(|&f| f == 0) {
            return bad("filter counts must be positive".into());
        }
        let mirrored_filters = (0..depth - 1).all(|i| self.decoder_filters[i] == self.encoder_filters[depth - 2 - i]);
        if !mirrored_filters {
            return bad(format!(
                "filter lists are not mirrored: encoder {:?}, decoder {:?}",
                self.encoder_filters, self.decoder_filters
            ));
        }
        if self.decoder_filters[depth - 1] != self.out_channels() {
            return bad(format!(
                "last decoder layer has {} filters, head needs {}",
                self.decoder_filters[depth - 1],
                self.out_channels()
            ));
        }
        let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
        if self.decoder_strides != rev(&self.encoder_strides) || self.decoder_paddings != rev(&self.encoder_paddings) {
            return bad("decoder strides/paddings do not mirror the encoder".into());
        }
        if self.encoder_strides.contains(&0) {
            return bad("strides must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) || self.dropout_layers >= depth {
            return bad(format!(
                "dropout p={} on {} layers is invalid",
                self.dropout_p, self.dropout_layers
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct BnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub state: BatchNormState<T>,
}

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BnParams<T>>,
    pub dropout: Option<DropoutState>,
    pub activation: Activation,
}

impl<T: Element> Layer<T> {
    fn weight_shape(&self) -> Shape {
        let (kh, kw) = self.geometry.kernel;
        match self.kind {
            LayerKind::Conv => Shape::new(self.out_channels, self.in_channels, kh, kw),
            LayerKind::ConvTranspose => Shape::new(self.in_channels, self.out_channels, kh, kw),
        }
    }

    fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let r = match self.kind {
            LayerKind::Conv => self.geometry.conv_out(h, w),
            LayerKind::ConvTranspose => self.geometry.transpose_out(h, w),
        };
        r.map_err(|e| Error::Shape(format!("layer {}: {e}", self.name)))
    }

    /// Learnable tensors in canonical order with their suffixes.
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("weight", &self.weight), ("bias", &self.bias)];
        if let Some(bn) = &self.bn {
            v.push(("bn.gamma", &bn.gamma));
            v.push(("bn.beta", &bn.beta));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("weight", &mut self.weight), ("bias", &mut self.bias)];
        if let Some(bn) = &mut self.bn {
            v.push(("bn.gamma", &mut bn.gamma));
            v.push(("bn.beta", &mut bn.beta));
        }
        v
    }
}

/// Every tensor a checkpoint stores for a layer: learnable parameters and
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Shape,
    pub learnable: bool,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
    pub(crate) param_vars: Vec<Var>,
}

fn dropout_seed(seed: u64, layer: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(layer as u64 + 1)
}

impl<T: Element> Model<T> {
    /// Builds the network with seeded He-normal weights.
    pub fn build(config: ModelConfig) -> Result<Self> {
        Self::construct(config, true)
    }

    /// Same layer table with all-zero weights, for loading stored values.
    pub(crate) fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::construct(config, false)
    }

    fn construct(config: ModelConfig, init: bool) -> Result<Self> {
        config.validate()?;
        let depth = config.encoder_filters.len();
        let mut rng = init.then(|| ChaCha8Rng::seed_from_u64(config.seed));
        let k = config.kernel;
        let mut layers = Vec::with_capacity(2 * depth);
        let mut in_ch = config.in_channels;
        for i in 0..depth {
            let out = config.encoder_filters[i];
            let geometry = ConvGeometry::new(k, config.encoder_strides[i], config.encoder_paddings[i]);
            layers.push(new_layer(format!("enc{}", i + 1), LayerKind::Conv, geometry, in_ch, out, i > 0, None, Activation::Relu, rng.as_mut())?);
            in_ch = out;
        }
        for i in 0..depth {
            let out = config.decoder_filters[i];
            let last = i == depth - 1;
            let geometry = ConvGeometry::new(k, config.decoder_strides[i], config.decoder_paddings[i]);
            let dropout = (i < config.dropout_layers)
                .then(|| DropoutState::new(config.dropout_p, dropout_seed(config.seed, depth + i)))
                .transpose()?;
            let activation = match (last, config.head) {
                (false, _) => Activation::Relu,
                (true, Head::Segmentation) => Activation::Softmax,
                (true, Head::Reconstruction) => Activation::Sigmoid,
            };
            let name = format!("dec{}", i + 1);
            layers.push(new_layer(name, LayerKind::ConvTranspose, geometry, in_ch, out, !last, dropout, activation, rng.as_mut())?);
            in_ch = out;
        }
        Ok(Model { config, layers, param_vars: Vec::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|(_, t)| t.numel()).sum()
    }

    /// Restarts every dropout stream from `seed`.
    pub fn reseed_dropout(&mut self, seed: u64) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(d) = &mut l.dropout {
                d.reseed(dropout_seed(seed, i));
            }
        }
    }

    /// Spatial shapes after each layer for an input of `input`, or a shape
    /// error naming the first layer that cannot accept its input.
    pub fn plan(&self, input: Shape) -> Result<Vec<Shape>> {
        let [n, c, h, w] = input.0;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {input:?}",
                self.config.in_channels
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut ch, mut cw) = (h, w);
        for l in &self.layers {
            if l.kind == LayerKind::Conv && l.geometry.stride > 1 && (ch % l.geometry.stride != 0 || cw % l.geometry.stride != 0) {
                return Err(Error::Shape(format!(
                    "layer {}: input {ch}x{cw} is not divisible by stride {}, output would not match input size",
                    l.name, l.geometry.stride
                )));
            }
            (ch, cw) = l.output_hw(ch, cw)?;
            shapes.push(Shape::new(n, l.out_channels, ch, cw));
        }
        if (ch, cw) != (h, w) {
            return Err(Error::Shape(format!("input {h}x{w} maps to output {ch}x{cw}")));
        }
        Ok(shapes)
    }

    /// Shape of the encoder output for a given input.
    pub fn latent_shape(&self, input: Shape) -> Result<Shape> {
        let depth = self.config.encoder_filters.len();
        Ok(self.plan(input)?[depth - 1])
    }

    /// Records the forward pass on `tape`. Parameters are registered as
    /// gradient-tracking leaves; see [`Model::accumulate_grads`].
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_impl(tape, x, mode, true)
    }

    fn forward_impl(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, track: bool) -> Result<Var> {
        self.plan(tape.shape(x))?;
        self.param_vars.clear();
        let mut h = x;
        for layer in &mut self.layers {
            let reg = |tape: &mut Tape<T>, t: &Tensor<T>| if track { tape.leaf(t) } else { tape.constant(t) };
            let w = reg(tape, &layer.weight);
            let b = reg(tape, &layer.bias);
            self.param_vars.extend([w, b]);
            h = match layer.kind {
                LayerKind::Conv => nn::conv2d(tape, h, w, b, layer.geometry),
                LayerKind::ConvTranspose => nn::conv_transpose2d(tape, h, w, b, layer.geometry),
            }
            .map_err(|e| Error::Shape(format!("layer {}: {e}", layer.name)))?;
            if let Some(bn) = &mut layer.bn {
                let g = reg(tape, &bn.gamma);
                let be = reg(tape, &bn.beta);
                self.param_vars.extend([g, be]);
                h = nn::batchnorm2d(tape, h, g, be, &mut bn.state, mode)
                    .map_err(|e| match e {
                        Error::DegenerateVariance(m) => Error::DegenerateVariance(format!("layer {}: {m}", layer.name)),
                        other => other,
                    })?;
            }
            h = match layer.activation {
                Activation::Relu => nn::relu(tape, h),
                Activation::Sigmoid => nn::sigmoid(tape, h),
                Activation::Softmax => nn::softmax_channels(tape, h)?,
            };
            if let Some(d) = &mut layer.dropout {
                h = nn::dropout2d(tape, h, d, mode)?;
            }
        }
        Ok(h)
    }

    /// Eval-mode inference without gradient bookkeeping.
    pub fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = self.forward_impl(&mut tape, xv, Mode::Eval, false)?;
        self.param_vars.clear();
        Ok(tape.value(y))
    }

    /// Moves the gradients of the last [`Model::forward`] into each
    /// parameter's `grad` slot.
    pub fn accumulate_grads(&mut self, grads: &mut Gradients<T>) -> Result<()> {
        let vars = std::mem::take(&mut self.param_vars);
        let mut it = vars.iter();
        for layer in &mut self.layers {
            for (_, t) in layer.params_mut() {
                let v = it.next().ok_or_else(|| Error::contract("accumulate_grads without a preceding forward"))?;
                grads.accumulate_into(*v, t)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.params_mut().into_iter().for_each(|(_, t)| t.zero_grad());
        }
    }

    /// Learnable parameters for the optimizer. Weight decay applies to
    /// convolution weights only.
    pub fn param_refs(&mut self) -> Vec<(String, ParamSlot<'_, T>)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let lname = layer.name.clone();
            for (suffix, t) in layer.params_mut() {
                out.push((format!("{lname}.{suffix}"), ParamSlot { tensor: t, decay: suffix == "weight" }));
            }
        }
        out
    }

    /// Runs `f` with optimizer-ready parameter references.
    pub fn with_params<R>(&mut self, f: impl FnOnce(&mut [ParamRef<'_, T>]) -> R) -> R {
        let mut slots = self.param_refs();
        let mut refs: Vec<ParamRef<'_, T>> = slots
            .iter_mut()
            .map(|(name, s)| ParamRef { name: name.as_str(), tensor: &mut *s.tensor, decay: s.decay })
            .collect();
        f(&mut refs)
    }

    /// Names and shapes of every stored tensor, in checkpoint order.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.named_tensors().into_iter().map(|(name, shape, _, learnable)| ParamInfo { name, shape, learnable }).collect()
    }

    /// `(name, shape, values, learnable)` for every stored tensor,
    /// including batch-norm running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Shape, &[T], bool)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (suffix, t) in l.params() {
                out.push((format!("{}.{suffix}", l.name), t.shape(), t.data(), true));
            }
            if let Some(bn) = &l.bn {
                let s = Shape::vector(bn.state.channels());
                out.push((format!("{}.bn.running_mean", l.name), s, bn.state.running_mean.as_slice(), false));
                out.push((format!("{}.bn.running_var", l.name), s, bn.state.running_var.as_slice(), false));
            }
        }
        out
    }

    /// Overwrites one stored tensor by name.
    pub fn set_tensor(&mut self, name: &str, values: &[T]) -> Result<()> {
        let (lname, suffix) = name
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("malformed tensor name '{name}'")))?;
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name == lname)
            .ok_or_else(|| Error::Checkpoint(format!("unknown layer in '{name}'")))?;
        let dst: &mut [T] = match (suffix, layer.bn.as_mut()) {
            ("weight", _) => layer.weight.data_mut(),
            ("bias", _) => layer.bias.data_mut(),
            ("bn.gamma", Some(bn)) => bn.gamma.data_mut(),
            ("bn.beta", Some(bn)) => bn.beta.data_mut(),
            ("bn.running_mean", Some(bn)) => &mut bn.state.running_mean,
            ("bn.running_var", Some(bn)) => &mut bn.state.running_var,
            _ => return Err(Error::Checkpoint(format!("unknown tensor '{name}'"))),
        };
        if dst.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has {} values, expected {}",
                values.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    /// Same network in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                kind: l.kind,
                geometry: l.geometry,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                bn: l.bn.as_ref().map(|bn| BnParams {
                    gamma: bn.gamma.cast(),
                    beta: bn.beta.cast(),
                    state: BatchNormState {
                        running_mean: bn.state.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        running_var: bn.state.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        momentum: U::from_f64(bn.state.momentum.as_f64()),
                        eps: U::from_f64(bn.state.eps.as_f64()),
                    },
                }),
                dropout: l.dropout.clone(),
                activation: l.activation,
            })
            .collect();
        Model { config: self.config.clone(), layers, param_vars: Vec::new() }
    }
}

pub struct ParamSlot<'a, T> {
    pub tensor: &'a mut Tensor<T>,
    pub decay: bool,
}

#[allow(clippy::too_many_arguments)]
fn new_layer<T: Element>(
    name: String,
    kind: LayerKind,
    geometry: ConvGeometry,
    in_channels: usize,
    out_channels: usize,
    batchnorm: bool,
    dropout: Option<DropoutState>,
    activation: Activation,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Layer<T>> {
    let mut layer = Layer {
        name,
        kind,
        geometry,
        in_channels,
        out_channels,
        weight: Tensor::zeros(Shape::SCALAR),
        bias: Tensor::zeros(Shape::vector(out_channels)).with_requires_grad(true),
        bn: batchnorm.then(|| BnParams {
            gamma: Tensor::full(Shape::vector(out_channels), T::one()).with_requires_grad(true),
            beta: Tensor::zeros(Shape::vector(out_channels)).with_requires_grad(true),
            state: BatchNormState::new(out_channels),
        }),
        dropout,
        activation,
    };
    let shape = layer.weight_shape();
    let Some(rng) = rng else {
        layer.weight = Tensor::zeros(shape).with_requires_grad(true);
        return Ok(layer);
    };
    let fan_in = (in_channels * geometry.kernel.0 * geometry.kernel.1) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let values = (0..shape.numel()).map(|_| T::from_f64(normal.sample(rng))).collect();
    layer.weight = Tensor::from_buffer(shape, values)?.with_requires_grad(true);
    Ok(layer)
}
