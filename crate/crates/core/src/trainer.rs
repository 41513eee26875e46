//! Losses, Adam with step decay, and the deterministic training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
use crate::dataset::{sample_tuple, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{build_network, Network, NetworkConfig, NetworkParams, OutputMode};
use crate::tensor::Tensor;

/// Mean absolute error and its subgradient `sign(pred − target) / count` (0 at ties).
///
/// `weight_mask` has the prediction's shape or `(N, 1, H, W)`, broadcast over
/// channels. Only elements with nonzero weight count; an all-zero mask gives loss 0.
pub fn l1_loss(prediction: &Tensor, target: &Tensor, weight_mask: Option<&Tensor>) -> Result<(f64, Tensor)> {
    target.ensure_shape(prediction.shape(), "l1 target")?;
    let mut grad = Tensor::zeros(prediction.shape());
    let weights = match weight_mask {
        None => None,
        Some(m) => Some(broadcast_channels(m, prediction.shape())?),
    };
    let weight = |i: usize| weights.as_ref().map_or(1.0, |w| w[i]);
    let count: f64 = (0..prediction.len()).map(weight).sum();
    if count == 0.0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, (&p, &t)) in prediction.data().iter().zip(target.data()).enumerate() {
        let w = weight(i);
        let d = p - t;
        total += w * d.abs();
        grad.data_mut()[i] = if d > 0.0 {
            w / count
        } else if d < 0.0 {
            -w / count
        } else {
            0.0
        };
    }
    Ok((total / count, grad))
}

fn broadcast_channels(mask: &Tensor, shape: &[usize]) -> Result<Vec<f64>> {
    if mask.shape() == shape {
        return Ok(mask.data().to_vec());
    }
    match (mask.shape(), shape) {
        ([mn, 1, mh, mw], [n, c, h, w]) if (mn, mh, mw) == (n, h, w) => {
            let plane = h * w;
            Ok((0..n * c * plane)
                .map(|i| mask.data()[(i / (c * plane)) * plane + i % plane])
                .collect())
        }
        (m, s) => Err(Error::config(format!(
            "weight mask {m:?} does not fit prediction {s:?}"
        ))),
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `{0, 1}` labels, in the
/// stable form `max(x, 0) − x·y + ln(1 + e^−|x|)`; gradient `(σ(x) − y) / count`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    labels.ensure_shape(logits.shape(), "cross-entropy labels")?;
    if let Some(bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::data(format!("cross-entropy label {bad} is not 0 or 1")));
    }
    let count = logits.len() as f64;
    if count == 0.0 {
        return Err(Error::usage("cross-entropy over an empty tensor"));
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, (&x, &y)) in logits.data().iter().zip(labels.data()).enumerate() {
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad.data_mut()[i] = (crate::network::sigmoid(x) - y) / count;
    }
    Ok((total / count, grad))
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_step_size() -> u64 {
    50_000
}
fn default_gamma() -> f64 {
    0.5
}

/// Adam hyperparameters. The learning rate is multiplied by `gamma` every `step_size` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_step_size")]
    pub step_size: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            learning_rate: default_learning_rate(),
            step_size: default_step_size(),
            gamma: default_gamma(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.step_size > 0
            && self.gamma > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// `learning_rate · gamma^⌊t / step_size⌋` for the step taken after `t` completed steps.
    pub fn learning_rate_at(&self, t: u64) -> f64 {
        let decays = (t / self.step_size).min(i32::MAX as u64) as i32;
        self.learning_rate * self.gamma.powi(decays)
    }
}

/// Moments mirror the parameters; `t` counts completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: NetworkParams,
    pub v: NetworkParams,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &NetworkParams) -> Self {
        AdamState {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update in place; increments `state.t`.
pub fn adam_step(params: &mut NetworkParams, grads: &NetworkParams, state: &mut AdamState) -> Result<()> {
    let shapes_match = |a: &NetworkParams, b: &NetworkParams| {
        a.layers().len() == b.layers().len()
            && a.layers()
                .iter()
                .zip(b.layers())
                .all(|(x, y)| x.weight.shape() == y.weight.shape() && x.bias.shape() == y.bias.shape())
    };
    if !shapes_match(params, grads) || !shapes_match(params, &state.m) || !shapes_match(params, &state.v) {
        return Err(Error::config(
            "gradients or optimizer state do not mirror the parameters",
        ));
    }
    let c = state.config;
    let lr = c.learning_rate_at(state.t);
    state.t += 1;
    let t = state.t.min(i32::MAX as u64) as i32;
    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
    let layers = params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(state.m.layers_mut().iter_mut().zip(state.v.layers_mut()));
    for ((p, g), (m, v)) in layers {
        for (p, g, m, v) in [
            (&mut p.weight, &g.weight, &mut m.weight, &mut v.weight),
            (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias),
        ] {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
    Ok(())
}

/// Rounds every scalar to the nearest `f32`, the checkpoint storage precision.
pub fn round_to_f32(params: &mut NetworkParams) {
    for l in params.layers_mut() {
        for x in l.weight.data_mut().iter_mut().chain(l.bias.data_mut().iter_mut()) {
            *x = *x as f32 as f64;
        }
    }
}

/// What is trained and on which tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    SingleFlow,
    SinglePixels,
    Mask,
    MultiFlow,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::SingleFlow,
        TrainMode::SinglePixels,
        TrainMode::Mask,
        TrainMode::MultiFlow,
    ];

    pub fn output_mode(self) -> OutputMode {
        match self {
            TrainMode::SingleFlow => OutputMode::Flow,
            TrainMode::SinglePixels => OutputMode::Pixels,
            TrainMode::Mask => OutputMode::Mask,
            TrainMode::MultiFlow => OutputMode::FlowWithConfidence,
        }
    }

    /// Source views per tuple.
    pub fn views(self) -> usize {
        if self == TrainMode::MultiFlow {
            2
        } else {
            1
        }
    }

    pub fn from_output_mode(mode: OutputMode) -> Self {
        match mode {
            OutputMode::Flow => TrainMode::SingleFlow,
            OutputMode::Pixels => TrainMode::SinglePixels,
            OutputMode::Mask => TrainMode::Mask,
            OutputMode::FlowWithConfidence => TrainMode::MultiFlow,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::SingleFlow => "single-flow",
            TrainMode::SinglePixels => "single-pixels",
            TrainMode::Mask => "mask",
            TrainMode::MultiFlow => "multi-flow",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown mode {s:?}")))
    }
}

/// Pixels entering the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRegion {
    /// Every pixel of the target view.
    Full,
    /// Target foreground pixels only.
    Foreground,
}

/// Everything besides the architecture that determines a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_region: LossRegion,
    /// Write a checkpoint every this many iterations; 0 writes only at the end.
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
}

impl TrainSettings {
    pub fn new(mode: TrainMode, batch_size: usize, seed: u64) -> Self {
        TrainSettings {
            mode,
            batch_size,
            seed,
            loss_region: LossRegion::Full,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.adam.validate()
    }
}

/// Where a run writes its checkpoint and loss log.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Stream of the data-sampling generator; stream 0 of the same seed initializes weights.
const SAMPLING_STREAM: u64 = 1;

/// In-memory training state: network, optimizer, sampling generator and iteration.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    pub adam: AdamState,
    pub settings: TrainSettings,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh state. Initial weights are rounded to `f32` so checkpoints are lossless.
    pub fn new(config: &NetworkConfig, settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        if config.mode != settings.mode.output_mode() {
            return Err(Error::config(format!(
                "mode {} needs a {:?} network, got {:?}",
                settings.mode.name(),
                settings.mode.output_mode(),
                config.mode
            )));
        }
        let mut network = build_network(config, settings.seed)?;
        round_to_f32(&mut network.params);
        let adam = AdamState::new(settings.adam, &network.params);
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(Trainer {
            network,
            adam,
            settings,
            iteration: 0,
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.settings.validate()?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Trainer {
            network: Network {
                config: ckpt.config,
                params: ckpt.params,
            },
            adam: ckpt.adam,
            settings: ckpt.settings,
            iteration: ckpt.iteration,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.network.config.clone(),
            settings: self.settings,
            params: self.network.params.clone(),
            adam: self.adam.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            iteration: self.iteration,
        }
    }

    /// Draws the next training batch.
    pub fn sample_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        let views = self.settings.mode.views();
        let tuples = (0..self.settings.batch_size)
            .map(|_| sample_tuple(&dataset.manifest, Split::Train, views, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        dataset.batch(&tuples)
    }

    /// Loss and parameter gradients on a batch, without updating anything.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, NetworkParams)> {
        batch_loss_and_grads(&self.network, self.settings.mode, self.settings.loss_region, batch)
    }

    /// One sample→forward→loss→backward→update step; returns the batch loss.
    pub fn step(&mut self, dataset: &Dataset) -> Result<f64> {
        let batch = self.sample_batch(dataset)?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at iteration {}",
                self.iteration + 1
            )));
        }
        if grads
            .layers()
            .iter()
            .any(|l| l.weight.data().iter().chain(l.bias.data()).any(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "gradient at iteration {}",
                self.iteration + 1
            )));
        }
        adam_step(&mut self.network.params, &grads, &mut self.adam)?;
        round_to_f32(&mut self.network.params);
        round_to_f32(&mut self.adam.m);
        round_to_f32(&mut self.adam.v);
        self.iteration += 1;
        Ok(loss)
    }

    /// Steps until `until` iterations are done, logging and checkpointing on the way.
    /// On a non-finite loss the current state is saved next to the checkpoint with a
    /// `.diagnostic` suffix and the error is returned.
    pub fn run(&mut self, dataset: &Dataset, until: u64, paths: Option<&TrainPaths>) -> Result<Vec<f64>> {
        let mut log = match paths {
            Some(p) => {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p.log)
                    .map_err(|e| Error::io(&p.log, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut losses = Vec::new();
        while self.iteration < until {
            let loss = match self.step(dataset) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(p) = paths {
                        save_checkpoint(&self.checkpoint(), &diagnostic_path(&p.checkpoint))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            losses.push(loss);
            if let (Some(w), Some(p)) = (log.as_mut(), paths) {
                writeln!(w, "{}\t{}", self.iteration, format_loss(loss)).map_err(|e| Error::io(&p.log, e))?;
                let every = self.settings.checkpoint_every;
                if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < until {
                    w.flush().map_err(|e| Error::io(&p.log, e))?;
                    save_checkpoint(&self.checkpoint(), &p.checkpoint)?;
                }
            }
        }
        if let (Some(w), Some(p)) = (log.as_mut(), paths) {
            w.flush().map_err(|e| Error::io(&p.log, e))?;
            save_checkpoint(&self.checkpoint(), &p.checkpoint)?;
        }
        Ok(losses)
    }
}

/// `<checkpoint>.diagnostic`
pub fn diagnostic_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".diagnostic");
    PathBuf::from(s)
}

/// Loss and gradients of `network` on `batch` under the objective of `mode`.
pub fn batch_loss_and_grads(
    network: &Network,
    mode: TrainMode,
    region: LossRegion,
    batch: &Batch,
) -> Result<(f64, NetworkParams)> {
    if network.config.mode != mode.output_mode() {
        return Err(Error::config("network output does not match the training mode"));
    }
    if batch.sources.len() != mode.views() {
        return Err(Error::config(format!(
            "mode {} needs {} source view(s), batch has {}",
            mode.name(),
            mode.views(),
            batch.sources.len()
        )));
    }
    let weights = match region {
        LossRegion::Full => None,
        LossRegion::Foreground => Some(&batch.target_mask),
    };
    match mode {
        TrainMode::SingleFlow | TrainMode::SinglePixels => {
            let out = network.forward_single(&batch.sources[0], &batch.transforms[0])?;
            let (loss, grad) = l1_loss(&out.prediction, &batch.target, weights)?;
            Ok((loss, network.backward_single(&out.activations, &grad, None)?))
        }
        TrainMode::Mask => {
            let out = network.forward_single(&batch.sources[0], &batch.transforms[0])?;
            let (loss, grad) = cross_entropy_loss(&out.prediction, &batch.target_mask)?;
            Ok((loss, network.backward_single(&out.activations, &grad, None)?))
        }
        TrainMode::MultiFlow => {
            let out = network.forward_multi(&batch.sources, &batch.transforms)?;
            let (loss, grad) = l1_loss(&out.fused, &batch.target, weights)?;
            Ok((loss, network.backward_multi(&out, &grad)?))
        }
    }
}

/// Decimal with 9 significant digits.
pub fn format_loss(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (8 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Fresh training run: truncates the log, trains `iterations` steps and returns the
/// final checkpoint (also written to `paths.checkpoint`).
pub fn train(
    config: &NetworkConfig,
    dataset: &Dataset,
    settings: TrainSettings,
    iterations: u64,
    paths: &TrainPaths,
) -> Result<Checkpoint> {
    check_dataset(config, dataset)?;
    let mut trainer = Trainer::new(config, settings)?;
    File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
    trainer.run(dataset, iterations, Some(paths))?;
    Ok(trainer.checkpoint())
}

/// Continues from `ckpt` until `iterations` total steps. Log lines past the
/// checkpoint's iteration are dropped first, so the log matches an uninterrupted run.
pub fn resume(ckpt: Checkpoint, dataset: &Dataset, iterations: u64, paths: &TrainPaths) -> Result<Checkpoint> {
    check_dataset(&ckpt.config, dataset)?;
    let done = ckpt.iteration;
    if iterations < done {
        return Err(Error::usage(format!(
            "checkpoint is already at iteration {done}, beyond the requested {iterations}"
        )));
    }
    let kept = match fs::read_to_string(&paths.log) {
        Ok(text) => text
            .lines()
            .take_while(|l| {
                l.split('\t')
                    .next()
                    .and_then(|i| i.parse::<u64>().ok())
                    .is_some_and(|i| i <= done)
            })
            .map(|l| format!("{l}\n"))
            .collect::<String>(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(&paths.log, e)),
    };
    fs::write(&paths.log, kept).map_err(|e| Error::io(&paths.log, e))?;
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    trainer.run(dataset, iterations, Some(paths))?;
    Ok(trainer.checkpoint())
}

fn check_dataset(config: &NetworkConfig, dataset: &Dataset) -> Result<()> {
    if dataset.image_size() != config.image_size {
        return Err(Error::config(format!(
            "dataset images are {}px but the network expects {}px",
            dataset.image_size(),
            config.image_size
        )));
    }
    Ok(())
}
