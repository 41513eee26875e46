//! Foreground L1 evaluation, cross-view confusion matrices and visual overlays.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{analytic_flow, sample_tuple, Dataset, SourceView, Split, TrainingTuple, DELTA_STEP_DEG};
use crate::error::{Error, Result};
use crate::image::{draw_line, draw_text, heat_color, Raster};
use crate::network::{sigmoid, Network, OutputMode};
use crate::sampler::{bilinear_sample, FlowField};
use crate::tensor::Tensor;

/// Tuples pushed through the network together.
const EVAL_CHUNK: usize = 32;

/// Mean of `|pred − target|` over foreground pixels and all channels.
///
/// `prediction` and `target` are `(C, H, W)` or `(1, C, H, W)`; `mask` holds `H·W`
/// binary values. Returns `None` when the foreground is empty.
pub fn mean_foreground_l1(prediction: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Option<f64>> {
    target.ensure_shape(prediction.shape(), "l1 target")?;
    let shape = prediction.shape();
    if shape.len() < 2 {
        return Err(Error::config(format!("prediction shape {shape:?} has no image plane")));
    }
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    if mask.len() != plane {
        return Err(Error::config(format!(
            "mask {:?} does not cover a {plane}-pixel plane",
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::data("foreground mask is not binary"));
    }
    let fg = mask.data().iter().filter(|&&m| m == 1.0).count();
    if fg == 0 {
        return Ok(None);
    }
    let channels = prediction.len() / plane;
    let mut total = 0.0;
    for (i, (&p, &t)) in prediction.data().iter().zip(target.data()).enumerate() {
        if mask.data()[i % plane] == 1.0 {
            total += (p - t).abs();
        }
    }
    Ok(Some(total / (fg * channels) as f64))
}

/// Fraction of pixels where `sigmoid(logit) ≥ 0.5` agrees with the binary mask.
pub fn mask_accuracy(logits: &Tensor, mask: &Tensor) -> Result<f64> {
    mask.ensure_shape(logits.shape(), "mask labels")?;
    if logits.is_empty() {
        return Err(Error::usage("mask accuracy over an empty tensor"));
    }
    let hits = logits
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(&x, &y)| (sigmoid(x) >= 0.5) == (y == 1.0))
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Something that synthesizes target views from tuples.
#[derive(Debug, Clone)]
pub enum Predictor {
    Network(Network),
    /// Warps the source with the exact rotation flow; needs no training.
    AnalyticOracle,
}

impl Predictor {
    /// Source views per tuple.
    pub fn views(&self) -> usize {
        match self {
            Predictor::Network(n) if n.config.mode == OutputMode::FlowWithConfidence => 2,
            _ => 1,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            Predictor::AnalyticOracle => "analytic-oracle",
            Predictor::Network(n) => match n.config.mode {
                OutputMode::Flow => "single-flow",
                OutputMode::Pixels => "single-pixels",
                OutputMode::Mask => "mask",
                OutputMode::FlowWithConfidence => "multi-flow",
            },
        }
    }

    fn is_mask(&self) -> bool {
        matches!(self, Predictor::Network(n) if n.config.mode == OutputMode::Mask)
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if let Predictor::Network(n) = self {
            if n.config.image_size != dataset.image_size() {
                return Err(Error::config(format!(
                    "network expects {}px images, dataset has {}px",
                    n.config.image_size,
                    dataset.image_size()
                )));
            }
        }
        Ok(())
    }

    /// `(N, C, H, W)` predictions for tuples that all have the same number of sources:
    /// RGB for synthesis predictors, foreground logits for mask networks.
    pub fn predict(&self, dataset: &Dataset, tuples: &[TrainingTuple]) -> Result<Tensor> {
        self.check(dataset)?;
        match self {
            Predictor::AnalyticOracle => {
                let step = dataset.manifest.azimuth_step_deg as f64;
                let s = dataset.image_size();
                let outs = tuples
                    .iter()
                    .map(|t| {
                        let src = t.sources[0];
                        let view = dataset.view(t.instance, src.bin)?.reshape(&[1, 3, s, s])?;
                        let flow = analytic_flow(src.bin as f64 * step, t.target_bin as f64 * step, s, s);
                        bilinear_sample(&view, &flow)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack_batch(&outs.iter().collect::<Vec<_>>())
            }
            Predictor::Network(net) => {
                let batch = dataset.batch(tuples)?;
                if net.config.mode == OutputMode::FlowWithConfidence {
                    Ok(net.forward_multi(&batch.sources, &batch.transforms)?.fused)
                } else {
                    Ok(net.forward_single(&batch.sources[0], &batch.transforms[0])?.prediction)
                }
            }
        }
    }

    /// Per-tuple scores: foreground L1, or pixel accuracy for mask networks.
    fn score(&self, dataset: &Dataset, tuples: &[TrainingTuple]) -> Result<Vec<Option<f64>>> {
        let preds: Vec<Tensor> = tuples
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| self.predict(dataset, chunk))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::with_capacity(tuples.len());
        for (chunk, pred) in tuples.chunks(EVAL_CHUNK).zip(preds) {
            for (i, t) in chunk.iter().enumerate() {
                let p = pred.batch_slice(i, 1);
                let mask = dataset.mask(t.instance, t.target_bin)?;
                scores.push(if self.is_mask() {
                    Some(mask_accuracy(&p, &mask.reshape(p.shape())?)?)
                } else {
                    let target = dataset.view(t.instance, t.target_bin)?.reshape(p.shape())?;
                    mean_foreground_l1(&p, &target, &mask)?
                });
            }
        }
        Ok(scores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaRow {
    /// Target-minus-source azimuth of the first source view.
    pub delta: i32,
    /// Tuples with a defined score.
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub mode: String,
    pub split: Split,
    pub seed: u64,
    pub tuples: usize,
    /// Tuples whose score is defined (non-empty target foreground).
    pub scored: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overall_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_accuracy: Option<f64>,
    pub per_delta: Vec<DeltaRow>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(format!("report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(format!("report: {e}")))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores `tuples` test tuples drawn with the training sampler from `split`.
/// Scores are averaged per tuple; undefined ones are left out.
pub fn evaluate(
    predictor: &Predictor,
    dataset: &Dataset,
    split: Split,
    tuples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if tuples == 0 {
        return Err(Error::usage("evaluation needs at least one tuple"));
    }
    predictor.check(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = (0..tuples)
        .map(|_| sample_tuple(&dataset.manifest, split, predictor.views(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let scores = predictor.score(dataset, &sampled)?;
    let mut by_delta: BTreeMap<i32, Vec<f64>> = dataset.manifest.deltas.iter().map(|&d| (d, Vec::new())).collect();
    for (t, s) in sampled.iter().zip(&scores) {
        if let Some(v) = s {
            by_delta.entry(t.sources[0].delta).or_default().push(*v);
        }
    }
    let overall = mean(scores.iter().flatten().copied());
    Ok(EvalReport {
        mode: predictor.mode_name().to_string(),
        split,
        seed,
        tuples,
        scored: scores.iter().flatten().count(),
        overall_l1: if predictor.is_mask() { None } else { overall },
        mask_accuracy: if predictor.is_mask() { overall } else { None },
        per_delta: by_delta
            .into_iter()
            .map(|(delta, v)| DeltaRow {
                delta,
                count: v.len(),
                mean: mean(v.into_iter()),
            })
            .collect(),
    })
}

/// Wraps an azimuth difference into `(−180, 180]`.
pub fn wrap_delta(deg: i32) -> i32 {
    let d = deg.rem_euclid(360);
    if d > 180 {
        d - 360
    } else {
        d
    }
}

/// Mean foreground L1 of synthesizing target azimuth (column) from input azimuth (row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionMatrix {
    /// Row and column azimuths in degrees.
    pub azimuths: Vec<i32>,
    /// Per-cell sample counts with a defined score.
    pub counts: Vec<Vec<usize>>,
    /// Per-cell means; `None` where no sample was scored.
    pub values: Vec<Vec<Option<f64>>>,
}

impl ConfusionMatrix {
    /// Delta of cell `(r, c)`: target minus input, wrapped into `(−180, 180]`.
    pub fn delta(&self, r: usize, c: usize) -> i32 {
        wrap_delta(self.azimuths[c] - self.azimuths[r])
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let b = self.azimuths.len();
        (0..b).flat_map(move |r| (0..b).map(move |c| (r, c)))
    }

    /// Unweighted mean of defined cells satisfying `keep(delta)`.
    pub fn mean_where(&self, keep: impl Fn(i32) -> bool) -> Option<f64> {
        mean(
            self.cells()
                .filter(|&(r, c)| keep(self.delta(r, c)))
                .filter_map(|(r, c)| self.values[r][c]),
        )
    }

    pub fn mean_all(&self) -> Option<f64> {
        self.mean_where(|_| true)
    }

    /// Sample-weighted mean over every cell.
    pub fn aggregate(&self) -> Option<f64> {
        let (sum, n) = self
            .cells()
            .fold((0.0, 0usize), |(s, n), (r, c)| match self.values[r][c] {
                Some(v) => (s + v * self.counts[r][c] as f64, n + self.counts[r][c]),
                None => (s, n),
            });
        (n > 0).then(|| sum / n as f64)
    }

    /// TOML with `null`-free encoding: undefined cells are written as `-1.0`.
    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            azimuths: &'a [i32],
            counts: &'a [Vec<usize>],
            values: Vec<Vec<f64>>,
        }
        let values = self
            .values
            .iter()
            .map(|row| row.iter().map(|v| v.unwrap_or(-1.0)).collect())
            .collect();
        toml::to_string(&Out {
            azimuths: &self.azimuths,
            counts: &self.counts,
            values,
        })
        .map_err(|e| Error::format(format!("confusion matrix: {e}")))
    }

    /// Blue-to-red heatmap, scaled to the largest defined cell, with azimuth labels
    /// along the top (targets) and left (inputs). Undefined cells are gray.
    pub fn heatmap(&self) -> Raster {
        const CELL: usize = 14;
        const LEFT: usize = 16;
        const TOP: usize = 8;
        let b = self.azimuths.len();
        let mut img = Raster::filled(LEFT + b * CELL, TOP + b * CELL, 3, 255);
        let max = self.values.iter().flatten().flatten().fold(0.0f64, |m, &v| m.max(v));
        for (r, c) in self.cells() {
            let color = match self.values[r][c] {
                Some(v) if max > 0.0 => heat_color(v / max),
                Some(_) => heat_color(0.0),
                None => [160, 160, 160],
            };
            for y in 0..CELL - 1 {
                for x in 0..CELL - 1 {
                    img.put((LEFT + c * CELL + x) as i64, (TOP + r * CELL + y) as i64, color);
                }
            }
        }
        for (i, a) in self.azimuths.iter().enumerate() {
            draw_text(&mut img, (LEFT + i * CELL) as i64, 1, &a.to_string(), [0, 0, 0]);
            draw_text(&mut img, 1, (TOP + i * CELL + 4) as i64, &a.to_string(), [0, 0, 0]);
        }
        img
    }
}

/// Fills an 18×18 matrix over azimuths `0, 20, …, 340`: each cell scores
/// `samples_per_cell` random instances of `split`. Needs a single-source predictor.
pub fn confusion_matrix(
    predictor: &Predictor,
    dataset: &Dataset,
    split: Split,
    samples_per_cell: usize,
    seed: u64,
) -> Result<ConfusionMatrix> {
    if samples_per_cell == 0 {
        return Err(Error::usage("confusion matrix needs at least one sample per cell"));
    }
    if predictor.views() != 1 || predictor.is_mask() {
        return Err(Error::config(format!(
            "confusion matrix needs a single-view synthesis predictor, got {}",
            predictor.mode_name()
        )));
    }
    predictor.check(dataset)?;
    let manifest = &dataset.manifest;
    let ids = manifest.instances_in(split);
    if ids.is_empty() {
        return Err(Error::data(format!("split {split:?} has no instances")));
    }
    let step = manifest.azimuth_step_deg;
    let azimuths: Vec<i32> = (0..360 / DELTA_STEP_DEG).map(|i| i * DELTA_STEP_DEG).collect();
    for &a in &azimuths {
        let bin = (a / step) as usize;
        if a % step != 0 || !manifest.azimuth_bins.contains(&bin) {
            return Err(Error::data(format!("dataset has no view at azimuth {a}°")));
        }
    }
    let b = azimuths.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuples = Vec::with_capacity(b * b * samples_per_cell);
    for &row in &azimuths {
        for &col in &azimuths {
            let delta = wrap_delta(col - row);
            for _ in 0..samples_per_cell {
                tuples.push(TrainingTuple {
                    instance: ids[rng.random_range(0..ids.len())],
                    target_bin: (col / step) as usize,
                    sources: vec![SourceView {
                        bin: (row / step) as usize,
                        delta,
                    }],
                });
            }
        }
    }
    let scores = predictor.score(dataset, &tuples)?;
    let mut counts = vec![vec![0usize; b]; b];
    let mut values = vec![vec![None; b]; b];
    for (cell, chunk) in scores.chunks(samples_per_cell).enumerate() {
        let (r, c) = (cell / b, cell % b);
        counts[r][c] = chunk.iter().flatten().count();
        values[r][c] = mean(chunk.iter().flatten().copied());
    }
    Ok(ConfusionMatrix {
        azimuths,
        counts,
        values,
    })
}

/// A drawn flow line in overlay canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSegment {
    pub from: (f64, f64),
    pub to: (f64, f64),
}

/// Pixels between the two overlay panels.
pub const OVERLAY_GUTTER: usize = 4;

/// Side-by-side overlay: the warped target estimate on the left, the source on the
/// right, and lines from `samples` random target pixels to their source coordinates.
/// `source` is `(3, H, W)` or `(1, 3, H, W)`; `flow` has batch size 1.
pub fn visualize_flow(
    source: &Tensor,
    flow: &FlowField,
    samples: usize,
    seed: u64,
) -> Result<(Raster, Vec<FlowSegment>)> {
    let (n, _, h, w) = flow.dims();
    if n != 1 {
        return Err(Error::config("flow overlay takes a single flow field"));
    }
    let src = source.clone().reshape(&[1, 3, h, w])?;
    let warped = bilinear_sample(&src, flow)?;
    let left = Raster::from_tensor(&warped)?;
    let right = Raster::from_tensor(&src)?;
    let mut img = Raster::filled(2 * w + OVERLAY_GUTTER, h, 3, 255);
    for y in 0..h {
        for x in 0..w {
            let l = left.get(x, y);
            img.put(x as i64, y as i64, [l[0], l[1], l[2]]);
            let r = right.get(x, y);
            img.put((w + OVERLAY_GUTTER + x) as i64, y as i64, [r[0], r[1], r[2]]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = flow.offsets().data();
    let plane = h * w;
    let mut segments = Vec::with_capacity(samples);
    for i in 0..samples {
        let p = rng.random_range(0..plane);
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let seg = FlowSegment {
            from: (x, y),
            to: ((w + OVERLAY_GUTTER) as f64 + x + offsets[p], y + offsets[plane + p]),
        };
        let color = heat_color(if samples > 1 {
            i as f64 / (samples - 1) as f64
        } else {
            1.0
        });
        draw_line(
            &mut img,
            (seg.from.0.round() as i64, seg.from.1.round() as i64),
            (seg.to.0.round() as i64, seg.to.1.round() as i64),
            color,
        );
        segments.push(seg);
    }
    Ok((img, segments))
}

/// One heatmap per normalized confidence mask (`(1, H, W)` or `(1, 1, H, W)`).
pub fn visualize_confidence(masks: &[Tensor]) -> Result<Vec<Raster>> {
    masks
        .iter()
        .map(|m| {
            let s = m.shape();
            if s.len() < 2 || m.len() != s[s.len() - 1] * s[s.len() - 2] {
                return Err(Error::config(format!("confidence mask {s:?} is not a single plane")));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let mut img = Raster::filled(w, h, 3, 0);
            for (p, &v) in m.data().iter().enumerate() {
                img.put((p % w) as i64, (p / w) as i64, heat_color(v));
            }
            Ok(img)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreground_l1_cases() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| (i % 4) as f64 / 4.0);
        let all = Tensor::full(&[1, 2, 2], 1.0);
        assert_eq!(mean_foreground_l1(&t, &t, &all).unwrap(), Some(0.0));
        let zeros = Tensor::zeros(&[3, 2, 2]);
        let ones = Tensor::full(&[3, 2, 2], 1.0);
        assert_eq!(mean_foreground_l1(&ones, &zeros, &all).unwrap(), Some(1.0));
        // Left column foreground with |diff| 0.2 and 0.4.
        let pred = Tensor::new(&[1, 2, 2], vec![0.2, 0.9, 0.4, 0.1]).unwrap();
        let target = Tensor::zeros(&[1, 2, 2]);
        let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let v = mean_foreground_l1(&pred, &target, &mask).unwrap().unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert_eq!(mean_foreground_l1(&t, &t, &Tensor::zeros(&[2, 2])).unwrap(), None);
        assert!(matches!(
            mean_foreground_l1(&t, &t, &Tensor::full(&[2, 2], 0.5)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn wrap_delta_maps_half_turn_to_positive() {
        assert_eq!(wrap_delta(180), 180);
        assert_eq!(wrap_delta(-180), 180);
        assert_eq!(wrap_delta(200), -160);
        assert_eq!(wrap_delta(-20), -20);
        assert_eq!(wrap_delta(340), -20);
    }

    #[test]
    fn zero_flow_lines_are_horizontal() {
        let src = Tensor::from_fn(&[3, 6, 5], |i| (i % 7) as f64 / 7.0);
        let (img, segs) = visualize_flow(&src, &FlowField::zeros(1, 6, 5), 10, 3).unwrap();
        assert_eq!((img.height, img.width), (6, 2 * 5 + OVERLAY_GUTTER));
        for s in segs {
            assert_eq!(s.to.0 - s.from.0, (5 + OVERLAY_GUTTER) as f64);
            assert_eq!(s.to.1, s.from.1);
        }
        let (_, segs) = visualize_flow(&src, &FlowField::constant(1, 6, 5, 5.0, 0.0), 10, 3).unwrap();
        assert!(segs
            .iter()
            .all(|s| s.to.0 - s.from.0 == (10 + OVERLAY_GUTTER) as f64 && s.to.1 == s.from.1));
    }

    #[test]
    fn confidence_heatmaps() {
        let imgs = visualize_confidence(&[Tensor::full(&[1, 3, 3], 0.5), Tensor::full(&[1, 1, 3, 3], 1.0)]).unwrap();
        assert!(imgs[0].data.chunks(3).all(|p| p == heat_color(0.5)));
        assert!(imgs[1].data.chunks(3).all(|p| p == [255, 0, 0]));
    }

    #[test]
    fn mask_accuracy_counts_agreement() {
        let logits = Tensor::new(&[4], vec![2.0, -1.0, 0.0, -3.0]).unwrap();
        let mask = Tensor::new(&[4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(mask_accuracy(&logits, &mask).unwrap(), 0.75);
    }
}
