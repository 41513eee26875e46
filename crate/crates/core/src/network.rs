//! The encoder–decoder synthesis network and multi-view confidence fusion.
//!
//! Architecture: an input-view encoder (stride-2 convs then two fc layers), a
//! transform encoder (two fc layers) and a synthesis decoder (two fc layers then
//! stride-2 upconvs back to full resolution). Every layer is followed by a ReLU
//! except the last decoder layer, whose channels depend on the [`OutputMode`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerGrads, LayerParams};
use crate::sampler::{self, FlowField};
use crate::tensor::Tensor;

const UPCONV_KERNEL: usize = 4;
const UPCONV_STRIDE: usize = 2;
const UPCONV_PAD: usize = 1;
const CONV_STRIDE: usize = 2;

/// What the last decoder layer emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Two offset channels; the prediction is the source sampled along the flow.
    Flow,
    /// Three RGB channels decoded directly (the direct pixel generation baseline).
    Pixels,
    /// One channel of foreground logits.
    Mask,
    /// Flow offsets plus one raw confidence channel for multi-view fusion.
    FlowWithConfidence,
}

impl OutputMode {
    pub fn channels(self) -> usize {
        match self {
            OutputMode::Flow => 2,
            OutputMode::Pixels => 3,
            OutputMode::Mask => 1,
            OutputMode::FlowWithConfidence => 3,
        }
    }

    pub fn uses_flow(self) -> bool {
        matches!(self, OutputMode::Flow | OutputMode::FlowWithConfidence)
    }
}

/// A relative viewpoint change, encoded as a fixed-length real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTransform {
    pub vector: Vec<f64>,
}

impl ViewTransform {
    pub fn one_hot(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::data(format!("one-hot index {index} out of range {len}")));
        }
        let mut vector = vec![0.0; len];
        vector[index] = 1.0;
        Ok(ViewTransform { vector })
    }

    /// Index of the hot entry if this is a one-hot vector.
    pub fn hot_index(&self) -> Option<usize> {
        let ones: Vec<usize> = (0..self.vector.len()).filter(|&i| self.vector[i] == 1.0).collect();
        let rest_zero = self.vector.iter().filter(|&&v| v != 0.0).count() == 1;
        (ones.len() == 1 && rest_zero).then(|| ones[0])
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

fn transforms_tensor(transforms: &[ViewTransform], dim: usize) -> Result<Tensor> {
    if let Some(t) = transforms.iter().find(|t| t.len() != dim) {
        return Err(Error::config(format!(
            "transform has length {}, network expects {dim}",
            t.len()
        )));
    }
    Tensor::new(
        &[transforms.len(), dim],
        transforms.iter().flat_map(|t| t.vector.iter().copied()).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square image side; a power of two.
    pub image_size: usize,
    /// Output channels of the stride-2 encoder convs.
    pub conv_channels: Vec<usize>,
    /// Odd conv kernel size; padding is `kernel_size / 2`.
    pub kernel_size: usize,
    pub encoder_fc: [usize; 2],
    pub transform_fc: [usize; 2],
    /// The second width is reshaped to `(C, s, s)` with `s` the encoder's final spatial size.
    pub decoder_fc: [usize; 2],
    /// Output channels of every upconv except the last, which emits the mode's channels.
    pub upconv_channels: Vec<usize>,
    /// Length of the transform vector.
    pub transform_dim: usize,
    pub mode: OutputMode,
}

impl NetworkConfig {
    /// 64×64 configuration with six encoder convs.
    pub fn default_64(mode: OutputMode) -> Self {
        NetworkConfig {
            image_size: 64,
            conv_channels: vec![16, 32, 64, 128, 256, 256],
            kernel_size: 3,
            encoder_fc: [512, 512],
            transform_fc: [64, 64],
            decoder_fc: [512, 512],
            upconv_channels: vec![256, 128, 64, 32, 16],
            transform_dim: 19,
            mode,
        }
    }

    /// 32×32 configuration with five encoder convs, sized for desk-scale training runs.
    pub fn desk_32(mode: OutputMode) -> Self {
        NetworkConfig {
            image_size: 32,
            conv_channels: vec![16, 32, 64, 64, 128],
            kernel_size: 3,
            encoder_fc: [256, 256],
            transform_fc: [64, 64],
            decoder_fc: [256, 256],
            upconv_channels: vec![128, 64, 32, 16],
            transform_dim: 19,
            mode,
        }
    }

    /// Narrow 32×32 network for gradient checks.
    pub fn tiny(mode: OutputMode) -> Self {
        NetworkConfig {
            image_size: 32,
            conv_channels: vec![4, 4, 6, 6, 8],
            kernel_size: 3,
            encoder_fc: [12, 12],
            transform_fc: [6, 6],
            decoder_fc: [12, 16],
            upconv_channels: vec![6, 4, 4, 3],
            transform_dim: 19,
            mode,
        }
    }

    /// Two-conv 8×8 network for full finite-difference sweeps.
    pub fn reduced(mode: OutputMode) -> Self {
        NetworkConfig {
            image_size: 8,
            conv_channels: vec![3, 4],
            kernel_size: 3,
            encoder_fc: [8, 8],
            transform_fc: [5, 5],
            decoder_fc: [8, 12],
            upconv_channels: vec![4],
            transform_dim: 19,
            mode,
        }
    }

    pub fn with_mode(mut self, mode: OutputMode) -> Self {
        self.mode = mode;
        self
    }

    /// Spatial size after the encoder convs.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.conv_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if !self.image_size.is_power_of_two() {
            return Err(Error::config(format!(
                "image size {} is not a power of two",
                self.image_size
            )));
        }
        if n == 0 || n >= usize::BITS as usize || self.image_size >> n == 0 {
            return Err(Error::config(format!(
                "{n} stride-2 convs do not fit a {}px image",
                self.image_size
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("conv kernel size must be odd"));
        }
        if self.upconv_channels.len() + 1 != n {
            return Err(Error::config(format!(
                "{} upconv widths given for {n} convs; need {}",
                self.upconv_channels.len(),
                n - 1
            )));
        }
        let widths = self
            .conv_channels
            .iter()
            .chain(&self.upconv_channels)
            .chain(&self.encoder_fc)
            .chain(&self.transform_fc)
            .chain(&self.decoder_fc);
        if widths.clone().any(|&w| w == 0) || self.transform_dim == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        let s = self.bottleneck_size();
        if !self.decoder_fc[1].is_multiple_of(s * s) {
            return Err(Error::config(format!(
                "decoder fc width {} cannot be reshaped to {s}x{s} maps",
                self.decoder_fc[1]
            )));
        }
        Ok(())
    }

    /// `(name, kind, weight shape, fan_in)` for every layer in architecture order.
    /// All-zero parameters with this architecture's names and shapes.
    pub fn zero_params(&self) -> Result<NetworkParams> {
        self.validate()?;
        let layers = self
            .layer_specs()
            .into_iter()
            .map(|(name, kind, shape, _)| {
                let units = if kind == LayerKind::Upconv { shape[1] } else { shape[0] };
                LayerParams::new(name, Tensor::zeros(&shape), Tensor::zeros(&[units]))
            })
            .collect();
        NetworkParams::from_layers(layers)
    }

    fn layer_specs(&self) -> Vec<(String, LayerKind, Vec<usize>, usize)> {
        let k = self.kernel_size;
        let s = self.bottleneck_size();
        let mut specs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in self.conv_channels.iter().enumerate() {
            specs.push((
                format!("enc_conv{}", i + 1),
                LayerKind::Conv,
                vec![c, c_in, k, k],
                c_in * k * k,
            ));
            c_in = c;
        }
        let mut d_in = c_in * s * s;
        for (i, &d) in self.encoder_fc.iter().enumerate() {
            specs.push((format!("enc_fc{}", i + 1), LayerKind::Fc, vec![d, d_in], d_in));
            d_in = d;
        }
        let mut t_in = self.transform_dim;
        for (i, &d) in self.transform_fc.iter().enumerate() {
            specs.push((format!("tr_fc{}", i + 1), LayerKind::Fc, vec![d, t_in], t_in));
            t_in = d;
        }
        let mut d_in = self.encoder_fc[1] + self.transform_fc[1];
        for (i, &d) in self.decoder_fc.iter().enumerate() {
            specs.push((format!("dec_fc{}", i + 1), LayerKind::Fc, vec![d, d_in], d_in));
            d_in = d;
        }
        let mut c_in = self.decoder_fc[1] / (s * s);
        let outs = self.upconv_channels.iter().copied().chain([self.mode.channels()]);
        for (i, c) in outs.enumerate() {
            let fan = c_in * UPCONV_KERNEL * UPCONV_KERNEL / (UPCONV_STRIDE * UPCONV_STRIDE);
            specs.push((
                format!("dec_upconv{}", i + 1),
                LayerKind::Upconv,
                vec![c_in, c, UPCONV_KERNEL, UPCONV_KERNEL],
                fan,
            ));
            c_in = c;
        }
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Conv,
    Fc,
    Upconv,
}

/// All learnable layers of one network, in architecture order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<LayerParams>,
}

impl NetworkParams {
    /// Assembles parameters, rejecting duplicate layer names.
    pub fn from_layers(layers: Vec<LayerParams>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::config(format!("duplicate layer name {}", l.name)));
            }
        }
        Ok(NetworkParams { layers })
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat view over every weight then bias scalar of every layer.
    pub fn scalar_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            if index < l.weight.len() {
                return Some(&mut l.weight.data_mut()[index]);
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return Some(&mut l.bias.data_mut()[index]);
            }
            index -= l.bias.len();
        }
        None
    }

    pub fn scalar(&self, index: usize) -> Option<f64> {
        let mut index = index;
        for l in &self.layers {
            if index < l.weight.len() {
                return Some(l.weight.data()[index]);
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return Some(l.bias.data()[index]);
            }
            index -= l.bias.len();
        }
        None
    }

    /// Elementwise `self += other` over matching layers.
    pub fn accumulate(&mut self, other: &NetworkParams) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::config("gradient layer count mismatch"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            a.bias.add_assign(&b.bias)?;
        }
        Ok(())
    }

    fn add_grads(&mut self, index: usize, grads: &LayerGrads) -> Result<()> {
        let l = &mut self.layers[index];
        l.weight.add_assign(&grads.grad_weight)?;
        l.bias.add_assign(&grads.grad_bias)
    }
}

/// Per-pixel nonnegative confidence `(N, 1, H, W)` for one input view.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    pub raw: Tensor,
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

/// Builds a network with zero-mean normal weights (std `sqrt(2/fan_in)`, or
/// `sqrt(1/fan_in)` for the linear output layer) and zero biases.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = config.layer_specs();
    let last = specs.len() - 1;
    let mut layers = Vec::with_capacity(specs.len());
    for (i, (name, kind, shape, fan_in)) in specs.into_iter().enumerate() {
        let gain = if i == last { 1.0 } else { 2.0 };
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
            .map_err(|e| Error::config(format!("bad init scale for {name}: {e}")))?;
        let weight = Tensor::from_fn(&shape, |_| normal.sample(&mut rng));
        let units = if kind == LayerKind::Upconv { shape[1] } else { shape[0] };
        layers.push(LayerParams::new(name, weight, Tensor::zeros(&[units])));
    }
    Ok(Network {
        config: config.clone(),
        params: NetworkParams::from_layers(layers)?,
    })
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    source: Tensor,
    transforms: Tensor,
    /// Post-activation outputs of every layer in architecture order; the last is the raw head.
    outputs: Vec<Tensor>,
    flow: Option<FlowField>,
    confidence_logit: Option<Tensor>,
}

/// Result of a single-view forward pass over a batch.
#[derive(Debug, Clone)]
pub struct SingleOutput {
    /// Sampled RGB (flow modes), decoded RGB (pixels) or foreground logits (mask).
    pub prediction: Tensor,
    pub flow: Option<FlowField>,
    pub confidence: Option<ConfidenceMask>,
    pub activations: Activations,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Channels `range` of an `(N, C, H, W)` tensor.
fn channel_slice(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let s = t.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let k = range.len();
    let mut data = Vec::with_capacity(n * k * plane);
    for ni in 0..n {
        data.extend_from_slice(&t.data()[(ni * c + range.start) * plane..(ni * c + range.end) * plane]);
    }
    Tensor::new(&[n, k, s[2], s[3]], data).expect("channel slice shape")
}

/// Writes `part` into channels starting at `start` of `dst`.
fn channel_write(dst: &mut Tensor, start: usize, part: &Tensor) {
    let s = dst.shape().to_vec();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let k = part.shape()[1];
    for ni in 0..n {
        dst.data_mut()[(ni * c + start) * plane..(ni * c + start + k) * plane]
            .copy_from_slice(&part.data()[ni * k * plane..(ni + 1) * k * plane]);
    }
}

impl Network {
    fn kind(&self, index: usize) -> LayerKind {
        let n = self.config.conv_channels.len();
        let fcs = 6;
        if index < n {
            LayerKind::Conv
        } else if index < n + fcs {
            LayerKind::Fc
        } else {
            LayerKind::Upconv
        }
    }

    fn apply(&self, index: usize, input: &Tensor) -> Result<Tensor> {
        let p = &self.params.layers[index];
        match self.kind(index) {
            LayerKind::Conv => layers::conv2d(input, p, CONV_STRIDE, self.config.kernel_size / 2),
            LayerKind::Fc => {
                let flat = self.fc_input(input);
                layers::fully_connected(&flat, p)
            }
            LayerKind::Upconv => {
                let maps = self.upconv_input(index, input)?;
                layers::upconv2d(&maps, p, UPCONV_STRIDE, UPCONV_PAD)
            }
        }
    }

    fn apply_backward(&self, index: usize, input: &Tensor, grad_out: &Tensor) -> Result<LayerGrads> {
        let p = &self.params.layers[index];
        let mut grads = match self.kind(index) {
            LayerKind::Conv => layers::conv2d_backward(input, p, CONV_STRIDE, self.config.kernel_size / 2, grad_out)?,
            LayerKind::Fc => layers::fully_connected_backward(&self.fc_input(input), p, grad_out)?,
            LayerKind::Upconv => {
                let maps = self.upconv_input(index, input)?;
                layers::upconv2d_backward(&maps, p, UPCONV_STRIDE, UPCONV_PAD, grad_out)?
            }
        };
        grads.grad_input = grads.grad_input.reshape(input.shape())?;
        Ok(grads)
    }

    fn fc_input(&self, input: &Tensor) -> Tensor {
        let n = input.shape()[0];
        let d = input.len() / n.max(1);
        input.clone().reshape(&[n, d]).expect("flatten")
    }

    fn upconv_input(&self, index: usize, input: &Tensor) -> Result<Tensor> {
        if input.rank() == 4 {
            return Ok(input.clone());
        }
        let c = self.params.layers[index].weight.shape()[0];
        let s = self.config.bottleneck_size();
        input.clone().reshape(&[input.shape()[0], c, s, s])
    }

    fn layer_range(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.config.conv_channels.len();
        (0..n + 2, n + 2..n + 4, n + 4..self.params.layers.len())
    }

    /// Runs a chain of layers, ReLU after each except optionally the last.
    fn run_chain(
        &self,
        range: std::ops::Range<usize>,
        input: &Tensor,
        relu_last: bool,
        outputs: &mut Vec<Tensor>,
    ) -> Result<()> {
        let last = range.end - 1;
        let mut x = input.clone();
        for i in range {
            let y = self.apply(i, &x)?;
            x = if i == last && !relu_last { y } else { layers::relu(&y) };
            outputs.push(x.clone());
        }
        Ok(())
    }

    /// Single-view forward pass over a batch of sources `(N, 3, H, W)` and `N` transforms.
    pub fn forward_single(&self, source: &Tensor, transforms: &[ViewTransform]) -> Result<SingleOutput> {
        let cfg = &self.config;
        let (n, c, h, w) = source.dims4("network source")?;
        if c != 3 || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::config(format!(
                "source {:?} does not match a {}px RGB network",
                source.shape(),
                cfg.image_size
            )));
        }
        if transforms.len() != n {
            return Err(Error::config(format!(
                "{} transforms for a batch of {n}",
                transforms.len()
            )));
        }
        let tr = transforms_tensor(transforms, cfg.transform_dim)?;
        let (enc, trc, dec) = self.layer_range();
        let mut outputs = Vec::with_capacity(self.params.layers.len());
        self.run_chain(enc, source, true, &mut outputs)?;
        self.run_chain(trc, &tr, true, &mut outputs)?;
        let n_enc = self.config.conv_channels.len() + 2;
        let joined = layers::concat(&outputs[n_enc - 1], &outputs[n_enc + 1], 1)?;
        self.run_chain(dec, &joined, false, &mut outputs)?;
        let head = outputs.last().expect("decoder output").clone();

        let (prediction, flow, confidence, confidence_logit) = match cfg.mode {
            OutputMode::Pixels | OutputMode::Mask => (head, None, None, None),
            OutputMode::Flow => {
                let flow = FlowField::new(head)?;
                (sampler::bilinear_sample(source, &flow)?, Some(flow), None, None)
            }
            OutputMode::FlowWithConfidence => {
                let flow = FlowField::new(channel_slice(&head, 0..2))?;
                let logit = channel_slice(&head, 2..3);
                let raw = logit.map(softplus);
                (
                    sampler::bilinear_sample(source, &flow)?,
                    Some(flow),
                    Some(ConfidenceMask { raw }),
                    Some(logit),
                )
            }
        };
        prediction.ensure_finite("network prediction")?;
        Ok(SingleOutput {
            prediction,
            flow: flow.clone(),
            confidence,
            activations: Activations {
                source: source.clone(),
                transforms: tr,
                outputs,
                flow,
                confidence_logit,
            },
        })
    }

    /// Parameter gradients given the loss gradient w.r.t. the prediction and, in
    /// `FlowWithConfidence` mode, w.r.t. the raw (post-softplus) confidence.
    pub fn backward_single(
        &self,
        acts: &Activations,
        grad_prediction: &Tensor,
        grad_confidence: Option<&Tensor>,
    ) -> Result<NetworkParams> {
        let head = acts.outputs.last().expect("decoder output");
        let grad_head = match self.config.mode {
            OutputMode::Pixels | OutputMode::Mask => {
                grad_prediction.ensure_shape(head.shape(), "grad_prediction")?;
                grad_prediction.clone()
            }
            OutputMode::Flow => {
                let flow = acts.flow.as_ref().expect("flow activations");
                sampler::bilinear_sample_backward(&acts.source, flow, grad_prediction)?.grad_flow
            }
            OutputMode::FlowWithConfidence => {
                let flow = acts.flow.as_ref().expect("flow activations");
                let grad_flow = sampler::bilinear_sample_backward(&acts.source, flow, grad_prediction)?.grad_flow;
                let logit = acts.confidence_logit.as_ref().expect("confidence activations");
                let grad_logit = match grad_confidence {
                    Some(g) => {
                        g.ensure_shape(logit.shape(), "grad_confidence")?;
                        Tensor::new(
                            logit.shape(),
                            logit
                                .data()
                                .iter()
                                .zip(g.data())
                                .map(|(&x, &g)| g * sigmoid(x))
                                .collect(),
                        )?
                    }
                    None => Tensor::zeros(logit.shape()),
                };
                let mut grad = Tensor::zeros(head.shape());
                channel_write(&mut grad, 0, &grad_flow);
                channel_write(&mut grad, 2, &grad_logit);
                grad
            }
        };

        let mut grads = self.params.zeros_like();
        let (enc, trc, dec) = self.layer_range();
        let n_enc = enc.end;
        let decoder_input = layers::concat(&acts.outputs[n_enc - 1], &acts.outputs[trc.end - 1], 1)?;
        let grad_joined = self.backward_chain(dec, &decoder_input, &acts.outputs, grad_head, false, &mut grads)?;
        let enc_width = acts.outputs[n_enc - 1].shape()[1];
        let (grad_enc, grad_tr) = layers::concat_backward(&grad_joined, enc_width, 1)?;
        self.backward_chain(trc, &acts.transforms, &acts.outputs, grad_tr, true, &mut grads)?;
        self.backward_chain(enc, &acts.source, &acts.outputs, grad_enc, true, &mut grads)?;
        Ok(grads)
    }

    fn backward_chain(
        &self,
        range: std::ops::Range<usize>,
        chain_input: &Tensor,
        outputs: &[Tensor],
        grad_out: Tensor,
        relu_last: bool,
        grads: &mut NetworkParams,
    ) -> Result<Tensor> {
        let (start, last) = (range.start, range.end - 1);
        let mut grad = grad_out;
        for i in range.rev() {
            if i != last || relu_last {
                grad = layers::relu_backward(&outputs[i], &grad)?;
            }
            let input = if i == start { chain_input } else { &outputs[i - 1] };
            let g = self.apply_backward(i, input, &grad)?;
            grads.add_grads(i, &g)?;
            grad = g.grad_input;
        }
        Ok(grad)
    }

    /// Replaces the last decoder layer's weight and bias with zeros. In flow modes
    /// this yields the identity warp.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.params.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
    }

    /// Multi-view forward pass: each view runs through the shared single-view
    /// network in `FlowWithConfidence` mode, then predictions are fused with
    /// per-pixel normalized confidences.
    pub fn forward_multi(&self, sources: &[Tensor], transforms: &[Vec<ViewTransform>]) -> Result<MultiOutput> {
        if sources.is_empty() {
            return Err(Error::usage("multi-view synthesis needs at least one view"));
        }
        if self.config.mode != OutputMode::FlowWithConfidence {
            return Err(Error::config(format!(
                "multi-view synthesis needs a flow_with_confidence network, got {:?}",
                self.config.mode
            )));
        }
        if transforms.len() != sources.len() {
            return Err(Error::config("one transform list per view is required"));
        }
        let n = sources[0].shape()[0];
        if let Some(s) = sources.iter().find(|s| s.shape() != sources[0].shape()) {
            return Err(Error::config(format!(
                "view shapes differ: {:?} vs {:?}",
                s.shape(),
                sources[0].shape()
            )));
        }
        let stacked = Tensor::stack_batch(&sources.iter().collect::<Vec<_>>())?;
        let all_tr: Vec<ViewTransform> = transforms.iter().flatten().cloned().collect();
        let single = self.forward_single(&stacked, &all_tr)?;
        let views = sources.len();
        let predictions: Vec<Tensor> = (0..views).map(|v| single.prediction.batch_slice(v * n, n)).collect();
        let raw_all = single.confidence.as_ref().expect("confidence output");
        let raw: Vec<ConfidenceMask> = (0..views)
            .map(|v| ConfidenceMask {
                raw: raw_all.raw.batch_slice(v * n, n),
            })
            .collect();
        let masks = normalize_confidence(&raw)?;
        let fused = fuse_predictions(&predictions, &masks)?;
        Ok(MultiOutput {
            fused,
            predictions,
            masks,
            raw,
            single,
        })
    }

    /// Parameter gradients of a multi-view forward pass given `dL/d fused`.
    pub fn backward_multi(&self, out: &MultiOutput, grad_fused: &Tensor) -> Result<NetworkParams> {
        let (grad_preds, grad_masks) = fuse_predictions_backward(&out.predictions, &out.masks, grad_fused)?;
        let grad_raw = normalize_confidence_backward(&out.raw, &out.masks, &grad_masks)?;
        let gp = Tensor::stack_batch(&grad_preds.iter().collect::<Vec<_>>())?;
        let gc = Tensor::stack_batch(&grad_raw.iter().collect::<Vec<_>>())?;
        self.backward_single(&out.single.activations, &gp, Some(&gc))
    }
}

/// Result of a multi-view forward pass.
#[derive(Debug, Clone)]
pub struct MultiOutput {
    pub fused: Tensor,
    pub predictions: Vec<Tensor>,
    /// Normalized confidences, one `(N, 1, H, W)` tensor per view.
    pub masks: Vec<Tensor>,
    pub raw: Vec<ConfidenceMask>,
    /// The batched single-view pass over all views.
    pub single: SingleOutput,
}

/// Below this total raw confidence a pixel falls back to uniform weights `1/N`.
pub const CONFIDENCE_EPS: f64 = 1e-8;

/// Normalizes raw confidences to sum to one at every pixel.
pub fn normalize_confidence(raw: &[ConfidenceMask]) -> Result<Vec<Tensor>> {
    let first = raw
        .first()
        .ok_or_else(|| Error::usage("cannot normalize an empty list of confidence masks"))?;
    let shape = first.raw.shape();
    if raw.iter().any(|m| m.raw.shape() != shape) {
        return Err(Error::config("confidence masks have different shapes"));
    }
    let views = raw.len();
    let mut out: Vec<Tensor> = raw.iter().map(|m| Tensor::zeros(m.raw.shape())).collect();
    for p in 0..first.raw.len() {
        let total: f64 = raw.iter().map(|m| m.raw.data()[p]).sum();
        for (o, m) in out.iter_mut().zip(raw) {
            o.data_mut()[p] = if total < CONFIDENCE_EPS {
                1.0 / views as f64
            } else {
                m.raw.data()[p] / total
            };
        }
    }
    Ok(out)
}

/// Gradient w.r.t. the raw confidences given the gradient w.r.t. the normalized ones.
/// Degenerate pixels (uniform fallback) receive zero gradient.
pub fn normalize_confidence_backward(
    raw: &[ConfidenceMask],
    normalized: &[Tensor],
    grad_normalized: &[Tensor],
) -> Result<Vec<Tensor>> {
    if raw.len() != normalized.len() || raw.len() != grad_normalized.len() || raw.is_empty() {
        return Err(Error::config("confidence gradient count mismatch"));
    }
    let mut out: Vec<Tensor> = raw.iter().map(|m| Tensor::zeros(m.raw.shape())).collect();
    for p in 0..raw[0].raw.len() {
        let total: f64 = raw.iter().map(|m| m.raw.data()[p]).sum();
        if total < CONFIDENCE_EPS {
            continue;
        }
        let mean: f64 = normalized
            .iter()
            .zip(grad_normalized)
            .map(|(c, g)| c.data()[p] * g.data()[p])
            .sum();
        for (o, g) in out.iter_mut().zip(grad_normalized) {
            o.data_mut()[p] = (g.data()[p] - mean) / total;
        }
    }
    Ok(out)
}

fn fusion_shapes(predictions: &[Tensor], masks: &[Tensor]) -> Result<(usize, usize, usize)> {
    if predictions.is_empty() || predictions.len() != masks.len() {
        return Err(Error::config(format!(
            "{} predictions and {} masks",
            predictions.len(),
            masks.len()
        )));
    }
    let (n, c, h, w) = predictions[0].dims4("fusion prediction")?;
    for (p, m) in predictions.iter().zip(masks) {
        p.ensure_shape(&[n, c, h, w], "fusion prediction")?;
        m.ensure_shape(&[n, 1, h, w], "fusion mask")?;
    }
    Ok((n, c, h * w))
}

/// Per-pixel weighted combination `Σ_j mask_j · prediction_j`, masks broadcast over channels.
pub fn fuse_predictions(predictions: &[Tensor], masks: &[Tensor]) -> Result<Tensor> {
    let (n, c, plane) = fusion_shapes(predictions, masks)?;
    let mut out = Tensor::zeros(predictions[0].shape());
    for (p, m) in predictions.iter().zip(masks) {
        for ni in 0..n {
            let mrow = &m.data()[ni * plane..(ni + 1) * plane];
            for ch in 0..c {
                let base = (ni * c + ch) * plane;
                let dst = &mut out.data_mut()[base..base + plane];
                for ((d, &pv), &mv) in dst.iter_mut().zip(&p.data()[base..base + plane]).zip(mrow) {
                    *d += mv * pv;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dL/d prediction_j, dL/d mask_j)` for every view.
pub fn fuse_predictions_backward(
    predictions: &[Tensor],
    masks: &[Tensor],
    grad_fused: &Tensor,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let (n, c, plane) = fusion_shapes(predictions, masks)?;
    grad_fused.ensure_shape(predictions[0].shape(), "grad_fused")?;
    let mut grad_preds = Vec::with_capacity(predictions.len());
    let mut grad_masks = Vec::with_capacity(predictions.len());
    for (p, m) in predictions.iter().zip(masks) {
        let mut gp = Tensor::zeros(p.shape());
        let mut gm = Tensor::zeros(m.shape());
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    let g = grad_fused.data()[base + i];
                    gp.data_mut()[base + i] = g * m.data()[ni * plane + i];
                    gm.data_mut()[ni * plane + i] += g * p.data()[base + i];
                }
            }
        }
        grad_preds.push(gp);
        grad_masks.push(gm);
    }
    Ok((grad_preds, grad_masks))
}

/// Background color used by [`apply_foreground_mask`].
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

/// Sets pixels whose foreground probability is below `threshold` to white.
/// A probability exactly at the threshold counts as foreground.
pub fn apply_foreground_mask(prediction: &Tensor, mask_logits: &Tensor, threshold: f64) -> Result<Tensor> {
    apply_foreground_mask_with(prediction, mask_logits, threshold, WHITE)
}

pub fn apply_foreground_mask_with(
    prediction: &Tensor,
    mask_logits: &Tensor,
    threshold: f64,
    background: [f64; 3],
) -> Result<Tensor> {
    let (n, c, h, w) = prediction.dims4("masked prediction")?;
    mask_logits.ensure_shape(&[n, 1, h, w], "mask logits")?;
    if c > background.len() {
        return Err(Error::config(format!("cannot mask a {c}-channel image")));
    }
    let plane = h * w;
    let mut out = prediction.clone();
    for ni in 0..n {
        for i in 0..plane {
            if sigmoid(mask_logits.data()[ni * plane + i]) < threshold {
                for (ch, &bg) in background.iter().enumerate().take(c) {
                    out.data_mut()[(ni * c + ch) * plane + i] = bg;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, size: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[n, 3, size, size], |i| {
            (((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64) / 1000.0
        })
    }

    fn transforms(n: usize, hot: usize) -> Vec<ViewTransform> {
        vec![ViewTransform::one_hot(hot, 19).unwrap(); n]
    }

    #[test]
    fn build_is_deterministic_and_mode_sized() {
        let cfg = NetworkConfig::default_64(OutputMode::Flow);
        let a = build_network(&cfg, 3).unwrap();
        let b = build_network(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let last = a.params.layers().last().unwrap();
        assert_eq!(last.weight.shape()[1], 2);
        let conf = build_network(&cfg.clone().with_mode(OutputMode::FlowWithConfidence), 3).unwrap();
        assert_eq!(conf.params.layers().last().unwrap().weight.shape()[1], 3);
        assert!(a
            .params
            .layers()
            .iter()
            .all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = NetworkConfig::tiny(OutputMode::Flow);
        cfg.image_size = 48;
        assert!(build_network(&cfg, 0).is_err());
        let mut cfg = NetworkConfig::tiny(OutputMode::Flow);
        cfg.upconv_channels.pop();
        assert!(build_network(&cfg, 0).is_err());
        let mut cfg = NetworkConfig::reduced(OutputMode::Flow);
        cfg.decoder_fc[1] = 7;
        assert!(build_network(&cfg, 0).is_err());
    }

    #[test]
    fn duplicate_layer_names_rejected() {
        let l = LayerParams::new("a", Tensor::zeros(&[1, 1]), Tensor::zeros(&[1]));
        assert!(NetworkParams::from_layers(vec![l.clone(), l]).is_err());
    }

    #[test]
    fn output_shapes_per_mode() {
        for (mode, ch) in [
            (OutputMode::Flow, 3),
            (OutputMode::Pixels, 3),
            (OutputMode::Mask, 1),
            (OutputMode::FlowWithConfidence, 3),
        ] {
            let net = build_network(&NetworkConfig::tiny(mode), 1).unwrap();
            let out = net.forward_single(&image(2, 32, 0), &transforms(2, 4)).unwrap();
            assert_eq!(out.prediction.shape(), &[2, ch, 32, 32]);
            assert_eq!(out.flow.is_some(), mode.uses_flow());
            assert_eq!(out.confidence.is_some(), mode == OutputMode::FlowWithConfidence);
        }
    }

    #[test]
    fn zero_output_layer_gives_identity() {
        let mut net = build_network(&NetworkConfig::tiny(OutputMode::Flow), 5).unwrap();
        net.zero_output_layer();
        let src = image(2, 32, 9);
        let out = net.forward_single(&src, &transforms(2, 9)).unwrap();
        assert_eq!(out.prediction, src);
        assert!(out.flow.unwrap().offsets().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let net = build_network(&NetworkConfig::tiny(OutputMode::Flow), 1).unwrap();
        assert!(net.forward_single(&image(1, 16, 0), &transforms(1, 0)).is_err());
        assert!(net
            .forward_single(&image(1, 32, 0), &[ViewTransform::one_hot(0, 5).unwrap()])
            .is_err());
        assert!(net.forward_single(&image(2, 32, 0), &transforms(1, 0)).is_err());
    }

    #[test]
    fn batched_forward_matches_per_example() {
        let net = build_network(&NetworkConfig::tiny(OutputMode::FlowWithConfidence), 2).unwrap();
        let src = image(3, 32, 4);
        let tr: Vec<ViewTransform> = (0..3).map(|i| ViewTransform::one_hot(i * 5, 19).unwrap()).collect();
        let batched = net.forward_single(&src, &tr).unwrap();
        for i in 0..3 {
            let one = net.forward_single(&src.batch_slice(i, 1), &tr[i..i + 1]).unwrap();
            assert_eq!(one.prediction, batched.prediction.batch_slice(i, 1));
        }
    }

    #[test]
    fn normalization_cases() {
        let one = ConfidenceMask {
            raw: Tensor::full(&[1, 1, 2, 2], 0.3),
        };
        let n = normalize_confidence(&[one]).unwrap();
        assert!(n[0].data().iter().all(|&v| v == 1.0));

        let a = ConfidenceMask {
            raw: Tensor::full(&[1, 1, 1, 1], 3.0),
        };
        let b = ConfidenceMask {
            raw: Tensor::full(&[1, 1, 1, 1], 1.0),
        };
        let n = normalize_confidence(&[a, b]).unwrap();
        assert_eq!((n[0].data()[0], n[1].data()[0]), (0.75, 0.25));

        let z = ConfidenceMask {
            raw: Tensor::zeros(&[1, 1, 3, 3]),
        };
        let n = normalize_confidence(&[z.clone(), z]).unwrap();
        assert!(n.iter().all(|m| m.data().iter().all(|&v| v == 0.5)));

        assert!(normalize_confidence(&[]).unwrap_err().is_usage());
    }

    #[test]
    fn fusion_cases() {
        let p = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 0.1);
        let m = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(fuse_predictions(std::slice::from_ref(&p), &[m]).unwrap(), p);

        let m1 = Tensor::from_fn(&[1, 1, 2, 2], |i| 0.1 * i as f64);
        let m2 = m1.map(|v| 1.0 - v);
        let fused = fuse_predictions(&[p.clone(), p.clone()], &[m1, m2]).unwrap();
        assert!(fused.max_abs_diff(&p) < 1e-15);

        let zero = Tensor::zeros(&[1, 1, 1, 1]);
        let one = Tensor::full(&[1, 1, 1, 1], 1.0);
        let w0 = Tensor::full(&[1, 1, 1, 1], 0.25);
        let w1 = Tensor::full(&[1, 1, 1, 1], 0.75);
        assert_eq!(fuse_predictions(&[zero, one], &[w0, w1]).unwrap().data(), &[0.75]);

        assert!(fuse_predictions(std::slice::from_ref(&p), &[]).is_err());
    }

    #[test]
    fn multi_view_one_and_duplicated_views() {
        let net = build_network(&NetworkConfig::tiny(OutputMode::FlowWithConfidence), 7).unwrap();
        let src = image(2, 32, 1);
        let tr = transforms(2, 3);
        let single = net.forward_single(&src, &tr).unwrap();
        let one = net
            .forward_multi(std::slice::from_ref(&src), std::slice::from_ref(&tr))
            .unwrap();
        assert_eq!(one.fused, single.prediction);
        let two = net
            .forward_multi(&[src.clone(), src.clone()], &[tr.clone(), tr.clone()])
            .unwrap();
        assert_eq!(two.fused, single.prediction);
        assert!(net.forward_multi(&[], &[]).unwrap_err().is_usage());
    }

    #[test]
    fn foreground_mask_cases() {
        let pred = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 0.05);
        let pos = Tensor::full(&[1, 1, 2, 2], 50.0);
        assert_eq!(apply_foreground_mask(&pred, &pos, 0.5).unwrap(), pred);
        let neg = Tensor::full(&[1, 1, 2, 2], -50.0);
        assert!(apply_foreground_mask(&pred, &neg, 0.5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let zero = Tensor::zeros(&[1, 1, 2, 2]);
        assert_eq!(apply_foreground_mask(&pred, &zero, 0.5).unwrap(), pred);
        assert!(apply_foreground_mask(&pred, &Tensor::zeros(&[1, 1, 3, 2]), 0.5).is_err());
    }

    #[test]
    fn view_transform_one_hot() {
        let t = ViewTransform::one_hot(9, 19).unwrap();
        assert_eq!(t.hot_index(), Some(9));
        assert!(ViewTransform::one_hot(19, 19).is_err());
        assert_eq!(ViewTransform { vector: vec![0.5, 0.5] }.hot_index(), None);
    }
}
