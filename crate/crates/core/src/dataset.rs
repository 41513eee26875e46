//! Procedural view-synthesis world.
//!
//! Each instance is a textured convex polygon on a white canvas. Its view at
//! azimuth θ is the canonical image rotated in-plane by θ about the canvas
//! center, so the warp between any two views is known exactly
//! ([`analytic_flow`]). Azimuths run over 72 bins of 5°; viewpoint changes are
//! restricted to the 19 deltas `-180, -160, …, 180` and encoded one-hot.
//!
//! On disk a dataset is a directory holding `manifest` (TOML) plus
//! `inst_<id>/view_<bin>.png` (8-bit RGB) and `inst_<id>/mask_<bin>.png`
//! (8-bit gray, 0 or 255) for every instance and azimuth bin.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::network::ViewTransform;
use crate::sampler::{bilinear_sample, FlowField};
use crate::tensor::Tensor;

pub const AZIMUTH_STEP_DEG: i32 = 5;
pub const VIEW_BINS: usize = 72;
pub const DELTA_STEP_DEG: i32 = 20;
/// Number of entries in the one-hot transform.
pub const TRANSFORM_DIM: usize = 19;
pub const SUPPORTED_SIZES: [usize; 2] = [32, 64];
pub const MANIFEST_VERSION: u32 = 1;
const MIN_INSTANCES: usize = 5;
const SPLIT_BLOCK: usize = 5;
const SPLIT_KEY: u64 = 0x5b17_5b17_5b17_5b17;

/// The 19 azimuth deltas `-180, -160, …, 180`.
pub fn delta_vocabulary() -> Vec<i32> {
    (0..TRANSFORM_DIM as i32).map(|i| -180 + DELTA_STEP_DEG * i).collect()
}

pub fn delta_index(delta_deg: i32) -> Result<usize> {
    if delta_deg % DELTA_STEP_DEG != 0 || !(-180..=180).contains(&delta_deg) {
        return Err(Error::data(format!(
            "azimuth delta {delta_deg}° is not one of -180, -160, ..., 180"
        )));
    }
    Ok(((delta_deg + 180) / DELTA_STEP_DEG) as usize)
}

/// One-hot encoding of an azimuth delta: index `(Δ + 180) / 20`.
pub fn encode_transform(delta_deg: i32) -> Result<ViewTransform> {
    ViewTransform::one_hot(delta_index(delta_deg)?, TRANSFORM_DIM)
}

pub fn decode_transform(t: &ViewTransform) -> Result<i32> {
    if t.len() != TRANSFORM_DIM {
        return Err(Error::data(format!(
            "transform has length {}, expected {TRANSFORM_DIM}",
            t.len()
        )));
    }
    let i = t.hot_index().ok_or_else(|| Error::data("transform is not one-hot"))?;
    Ok(-180 + DELTA_STEP_DEG * i as i32)
}

/// `(cos, sin)` of an angle in degrees, exact at multiples of 90°.
fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let rad = r * PI / 180.0;
            (rad.cos(), rad.sin())
        }
    }
}

/// Exact warp between two views of the rotation world.
///
/// Target pixel `p` reads source coordinate `R(θ_source − θ_target)·(p − c) + c`,
/// where `c = ((W−1)/2, (H−1)/2)` and `R(φ) = [[cos φ, −sin φ], [sin φ, cos φ]]`
/// acts on `(x, y)` with `y` pointing down. Returned as offsets, batch size 1.
pub fn analytic_flow(theta_source_deg: f64, theta_target_deg: f64, h: usize, w: usize) -> FlowField {
    let (cos, sin) = cos_sin_deg(theta_source_deg - theta_target_deg);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let plane = h * w;
    let offsets = Tensor::from_fn(&[1, 2, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        let (u, v) = ((p % w) as f64, (p / w) as f64);
        let (dx, dy) = (u - cx, v - cy);
        if ch == 0 {
            cx + cos * dx - sin * dy - u
        } else {
            cy + sin * dx + cos * dy - v
        }
    });
    FlowField::new(offsets).expect("two-channel flow")
}

/// A textured convex polygon in canvas-normalized coordinates (units of the image side,
/// origin at the canvas center).
#[derive(Debug, Clone)]
pub struct SpriteInstance {
    pub id: usize,
    /// Counter-clockwise convex hull.
    pub polygon: Vec<[f64; 2]>,
    base: [f64; 3],
    gradient: [[f64; 2]; 3],
    bump_center: [f64; 2],
    bump_amplitude: [f64; 3],
    bump_width: f64,
}

impl SpriteInstance {
    /// Reproducible from `(dataset seed, id)`.
    pub fn generate(seed: u64, id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        let k = rng.random_range(5..=8);
        let center = [rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)];
        let phase = rng.random_range(0.0..2.0 * PI);
        let points: Vec<[f64; 2]> = (0..k)
            .map(|i| {
                let a = phase + 2.0 * PI * (i as f64 + rng.random_range(0.15..0.85)) / k as f64;
                let r = rng.random_range(0.24..0.40);
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            })
            .collect();
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        SpriteInstance {
            id,
            polygon: convex_hull(points),
            base: [u(0.25, 0.65), u(0.25, 0.65), u(0.25, 0.65)],
            gradient: [
                [u(-1.1, 1.1), u(-1.1, 1.1)],
                [u(-1.1, 1.1), u(-1.1, 1.1)],
                [u(-1.1, 1.1), u(-1.1, 1.1)],
            ],
            bump_center: [u(-0.2, 0.2), u(-0.2, 0.2)],
            bump_amplitude: [u(-0.3, 0.3), u(-0.3, 0.3), u(-0.3, 0.3)],
            bump_width: u(0.1, 0.2),
        }
    }

    pub fn contains(&self, q: [f64; 2]) -> bool {
        let n = self.polygon.len();
        (0..n).all(|i| {
            let (a, b) = (self.polygon[i], self.polygon[(i + 1) % n]);
            (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) >= 0.0
        })
    }

    pub fn color(&self, q: [f64; 2]) -> [f64; 3] {
        let d2 = (q[0] - self.bump_center[0]).powi(2) + (q[1] - self.bump_center[1]).powi(2);
        let bump = (-d2 / (2.0 * self.bump_width * self.bump_width)).exp();
        let mut c = [0.0; 3];
        for (ch, out) in c.iter_mut().enumerate() {
            let g = self.gradient[ch];
            *out = (self.base[ch] + g[0] * q[0] + g[1] * q[1] + self.bump_amplitude[ch] * bump).clamp(0.02, 0.92);
        }
        c
    }

    /// Canonical (0°) view: `(rgb (3, S, S), mask (1, S, S))`, white background.
    pub fn render_canonical(&self, size: usize) -> (Tensor, Tensor) {
        let plane = size * size;
        let c = (size as f64 - 1.0) / 2.0;
        let mut rgb = Tensor::full(&[3, size, size], 1.0);
        let mut mask = Tensor::zeros(&[1, size, size]);
        for p in 0..plane {
            let q = [
                ((p % size) as f64 - c) / size as f64,
                ((p / size) as f64 - c) / size as f64,
            ];
            if self.contains(q) {
                mask.data_mut()[p] = 1.0;
                for (ch, v) in self.color(q).into_iter().enumerate() {
                    rgb.data_mut()[ch * plane + p] = v;
                }
            }
        }
        (rgb, mask)
    }
}

/// Andrew's monotone chain; counter-clockwise in a y-down frame means the
/// cross product test in [`SpriteInstance::contains`] is nonnegative inside.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Rotates a canonical view by `theta_deg` about the canvas center.
///
/// Color is resampled bilinearly with a white border; the mask is resampled and
/// thresholded at 0.5, and every background pixel is set to pure white.
pub fn render_view(canonical_rgb: &Tensor, canonical_mask: &Tensor, theta_deg: f64) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = match canonical_rgb.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::config(format!("canonical view has shape {s:?}"))),
    };
    let flow = analytic_flow(0.0, theta_deg, h, w);
    let ink = canonical_rgb.map(|v| 1.0 - v).reshape(&[1, 3, h, w])?;
    let ink = bilinear_sample(&ink, &flow)?;
    let mask = bilinear_sample(&canonical_mask.clone().reshape(&[1, 1, h, w])?, &flow)?
        .map(|m| if m >= 0.5 { 1.0 } else { 0.0 })
        .reshape(&[1, h, w])?;
    let plane = h * w;
    let rgb = Tensor::from_fn(&[3, h, w], |i| {
        if mask.data()[i % plane] == 1.0 {
            1.0 - ink.data()[i]
        } else {
            1.0
        }
    });
    Ok((rgb, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::usage(format!("unknown split {s:?}; use train or test"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub id: usize,
    pub split: Split,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub instance_count: usize,
    pub image_size: usize,
    pub azimuth_step_deg: i32,
    /// Azimuth bins present for every instance (bin `b` is `b · azimuth_step_deg` degrees).
    pub azimuth_bins: Vec<usize>,
    /// Transform vocabulary, in one-hot index order.
    pub deltas: Vec<i32>,
    pub view_file: String,
    pub mask_file: String,
    pub instances: Vec<InstanceEntry>,
}

impl DatasetManifest {
    pub fn instances_in(&self, split: Split) -> Vec<usize> {
        self.instances
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    pub fn view_path(&self, root: &Path, id: usize, bin: usize) -> PathBuf {
        root.join(format!("inst_{id}"))
            .join(self.view_file.replace("{bin}", &bin.to_string()))
    }

    pub fn mask_path(&self, root: &Path, id: usize, bin: usize) -> PathBuf {
        root.join(format!("inst_{id}"))
            .join(self.mask_file.replace("{bin}", &bin.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(format!("manifest: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| Error::format(format!("manifest: {e}")))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        if m.azimuth_bins.is_empty() || m.instances.is_empty() || m.deltas.len() != TRANSFORM_DIM {
            return Err(Error::format(
                "manifest lists no views, no instances or a wrong delta vocabulary",
            ));
        }
        Ok(m)
    }
}

/// Ids are grouped in blocks of five; one seeded slot per block is test, the rest
/// train. A pure function of `(seed, id)`, exactly 80/20 for multiples of five.
pub fn split_of(seed: u64, id: usize) -> Split {
    let block = (id / SPLIT_BLOCK) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_KEY);
    rng.set_stream(block);
    if rng.random_range(0..SPLIT_BLOCK) == id % SPLIT_BLOCK {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn split_assignment(seed: u64, count: usize) -> Vec<Split> {
    (0..count).map(|id| split_of(seed, id)).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Renders every view of every instance to `out` and writes the manifest.
pub fn generate_dataset(seed: u64, instance_count: usize, size: usize, out: &Path) -> Result<DatasetManifest> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::config(format!(
            "image size {size} is not supported; use 32 or 64"
        )));
    }
    if instance_count < MIN_INSTANCES {
        return Err(Error::config(format!(
            "need at least {MIN_INSTANCES} instances, got {instance_count}"
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed,
        instance_count,
        image_size: size,
        azimuth_step_deg: AZIMUTH_STEP_DEG,
        azimuth_bins: (0..VIEW_BINS).collect(),
        deltas: delta_vocabulary(),
        view_file: "view_{bin}.png".into(),
        mask_file: "mask_{bin}.png".into(),
        instances: Vec::with_capacity(instance_count),
    };
    for (id, split) in split_assignment(seed, instance_count).into_iter().enumerate() {
        manifest.instances.push(InstanceEntry {
            id,
            split,
            dir: format!("inst_{id}"),
        });
    }

    (0..instance_count).into_par_iter().try_for_each(|id| -> Result<()> {
        let dir = out.join(format!("inst_{id}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let sprite = SpriteInstance::generate(seed, id);
        let (rgb, mask) = sprite.render_canonical(size);
        for bin in 0..VIEW_BINS {
            let theta = (bin as i32 * AZIMUTH_STEP_DEG) as f64;
            let (view, view_mask) = render_view(&rgb, &mask, theta)?;
            write_atomic(
                &manifest.view_path(out, id, bin),
                &Raster::from_tensor(&view)?.encode_png()?,
            )?;
            write_atomic(
                &manifest.mask_path(out, id, bin),
                &Raster::from_tensor(&view_mask)?.encode_png()?,
            )?;
        }
        Ok(())
    })?;
    write_atomic(&out.join("manifest"), manifest.to_toml()?.as_bytes())?;
    Ok(manifest)
}

/// One view as stored on disk: 8-bit planar RGB and a {0,1} mask.
#[derive(Debug, Clone)]
struct StoredView {
    rgb: Vec<u8>,
    mask: Vec<u8>,
}

/// A loaded dataset: the manifest plus every view held in memory as bytes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    /// Indexed by instance position in the manifest, then by position in `azimuth_bins`.
    views: Vec<Vec<StoredView>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::from_toml(&text)?;
        let size = manifest.image_size;
        let views = manifest
            .instances
            .par_iter()
            .map(|entry| {
                manifest
                    .azimuth_bins
                    .iter()
                    .map(|&bin| {
                        let rgb = Raster::load_png(&manifest.view_path(root, entry.id, bin))?;
                        let mask = Raster::load_png(&manifest.mask_path(root, entry.id, bin))?;
                        if (rgb.width, rgb.height, rgb.channels) != (size, size, 3)
                            || (mask.width, mask.height, mask.channels) != (size, size, 1)
                        {
                            return Err(Error::data(format!(
                                "instance {} bin {bin}: image size does not match manifest",
                                entry.id
                            )));
                        }
                        Ok(StoredView {
                            rgb: planar(&rgb),
                            mask: mask.data.iter().map(|&m| u8::from(m >= 128)).collect(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest,
            root: root.to_path_buf(),
            views,
        })
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    fn stored(&self, instance: usize, bin: usize) -> Result<&StoredView> {
        let i = self
            .manifest
            .instances
            .iter()
            .position(|e| e.id == instance)
            .ok_or_else(|| Error::data(format!("no instance {instance}")))?;
        let b = self
            .manifest
            .azimuth_bins
            .iter()
            .position(|&x| x == bin)
            .ok_or_else(|| Error::data(format!("no azimuth bin {bin}")))?;
        Ok(&self.views[i][b])
    }

    /// `(3, S, S)` view with values in `[0, 1]`.
    pub fn view(&self, instance: usize, bin: usize) -> Result<Tensor> {
        let s = self.image_size();
        let v = self.stored(instance, bin)?;
        Tensor::new(&[3, s, s], v.rgb.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// `(1, S, S)` binary foreground mask.
    pub fn mask(&self, instance: usize, bin: usize) -> Result<Tensor> {
        let s = self.image_size();
        let v = self.stored(instance, bin)?;
        Tensor::new(&[1, s, s], v.mask.iter().map(|&b| f64::from(b)).collect())
    }

    /// Materializes a batch of tuples, all with the same number of source views.
    pub fn batch(&self, tuples: &[TrainingTuple]) -> Result<Batch> {
        let views = tuples.first().ok_or_else(|| Error::usage("empty batch"))?.sources.len();
        if tuples.iter().any(|t| t.sources.len() != views) {
            return Err(Error::config("tuples in a batch need the same number of sources"));
        }
        let s = self.image_size();
        let n = tuples.len();
        let mut sources = Vec::with_capacity(views);
        let mut transforms = Vec::with_capacity(views);
        for j in 0..views {
            let imgs = tuples
                .iter()
                .map(|t| self.view(t.instance, t.sources[j].bin))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = imgs.iter().collect();
            sources.push(Tensor::stack_batch(&refs)?.reshape(&[n, 3, s, s])?);
            transforms.push(
                tuples
                    .iter()
                    .map(|t| encode_transform(t.sources[j].delta))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let targets = tuples
            .iter()
            .map(|t| self.view(t.instance, t.target_bin))
            .collect::<Result<Vec<_>>>()?;
        let masks = tuples
            .iter()
            .map(|t| self.mask(t.instance, t.target_bin))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            sources,
            transforms,
            target: Tensor::stack_batch(&targets.iter().collect::<Vec<_>>())?.reshape(&[n, 3, s, s])?,
            target_mask: Tensor::stack_batch(&masks.iter().collect::<Vec<_>>())?.reshape(&[n, 1, s, s])?,
        })
    }
}

fn planar(r: &Raster) -> Vec<u8> {
    let plane = r.width * r.height;
    let mut out = vec![0u8; plane * r.channels];
    for p in 0..plane {
        for c in 0..r.channels {
            out[c * plane + p] = r.data[p * r.channels + c];
        }
    }
    out
}

/// A source view of a tuple: its azimuth bin and the target-minus-source delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceView {
    pub bin: usize,
    pub delta: i32,
}

/// `⟨I_s, I_t, T⟩` (one source) or `⟨I_s1, I_s2, I_t, T1, T2⟩` (two sources), by reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTuple {
    pub instance: usize,
    pub target_bin: usize,
    pub sources: Vec<SourceView>,
}

impl TrainingTuple {
    pub fn target_azimuth(&self, manifest: &DatasetManifest) -> i32 {
        self.target_bin as i32 * manifest.azimuth_step_deg
    }
}

/// Batch tensors for one training or evaluation step.
#[derive(Debug, Clone)]
pub struct Batch {
    /// One `(N, 3, S, S)` tensor per source view.
    pub sources: Vec<Tensor>,
    pub transforms: Vec<Vec<ViewTransform>>,
    pub target: Tensor,
    pub target_mask: Tensor,
}

fn bin_of_azimuth(manifest: &DatasetManifest, azimuth: i32) -> Option<usize> {
    let step = manifest.azimuth_step_deg;
    let a = azimuth.rem_euclid(360);
    if a % step != 0 {
        return None;
    }
    let bin = (a / step) as usize;
    manifest.azimuth_bins.contains(&bin).then_some(bin)
}

/// Uniform instance from `split`, uniform target bin, then for each source a
/// uniform delta among those whose source bin exists. Sources may coincide.
pub fn sample_tuple<R: Rng>(
    manifest: &DatasetManifest,
    split: Split,
    views: usize,
    rng: &mut R,
) -> Result<TrainingTuple> {
    let ids = manifest.instances_in(split);
    if ids.is_empty() {
        return Err(Error::data(format!("split {split:?} has no instances")));
    }
    let instance = ids[rng.random_range(0..ids.len())];
    let target_bin = manifest.azimuth_bins[rng.random_range(0..manifest.azimuth_bins.len())];
    let target_az = target_bin as i32 * manifest.azimuth_step_deg;
    let valid: Vec<(i32, usize)> = manifest
        .deltas
        .iter()
        .filter_map(|&d| bin_of_azimuth(manifest, target_az - d).map(|b| (d, b)))
        .collect();
    if valid.is_empty() {
        return Err(Error::data("no source view is reachable from the sampled target"));
    }
    let sources = (0..views)
        .map(|_| {
            let (delta, bin) = valid[rng.random_range(0..valid.len())];
            SourceView { bin, delta }
        })
        .collect();
    Ok(TrainingTuple {
        instance,
        target_bin,
        sources,
    })
}

pub fn sample_tuple_single<R: Rng>(manifest: &DatasetManifest, split: Split, rng: &mut R) -> Result<TrainingTuple> {
    sample_tuple(manifest, split, 1, rng)
}

pub fn sample_tuple_multi<R: Rng>(manifest: &DatasetManifest, split: Split, rng: &mut R) -> Result<TrainingTuple> {
    sample_tuple(manifest, split, 2, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_encoding() {
        assert_eq!(encode_transform(-180).unwrap().hot_index(), Some(0));
        assert_eq!(encode_transform(0).unwrap().hot_index(), Some(9));
        let t = encode_transform(180).unwrap();
        assert_eq!((t.hot_index(), t.len()), (Some(18), 19));
        for d in delta_vocabulary() {
            assert_eq!(decode_transform(&encode_transform(d).unwrap()).unwrap(), d);
        }
        for bad in [37, -200, 190, 10] {
            assert!(matches!(encode_transform(bad), Err(Error::Data(_))));
        }
    }

    #[test]
    fn analytic_flow_cases() {
        let f = analytic_flow(40.0, 40.0, 8, 8);
        assert!(f.offsets().data().iter().all(|&v| v == 0.0));
        // 90° relative rotation: target c + (1, 0) reads source c + (0, 1).
        let (h, w) = (9, 9);
        let f = analytic_flow(90.0, 0.0, h, w);
        let abs = f.to_absolute();
        let (cx, cy) = (4usize, 4usize);
        let p = cy * w + cx + 1;
        assert_eq!(abs.data()[p], cx as f64);
        assert_eq!(abs.data()[h * w + p], cy as f64 + 1.0);
    }

    #[test]
    fn hull_is_convex_and_contains_center() {
        for id in 0..20 {
            let s = SpriteInstance::generate(3, id);
            assert!(s.polygon.len() >= 3);
            assert!(s.contains([0.0, 0.0]));
            assert!(s.polygon.iter().all(|p| (p[0] * p[0] + p[1] * p[1]).sqrt() < 0.45));
        }
    }

    #[test]
    fn zero_rotation_is_canonical() {
        let s = SpriteInstance::generate(1, 0);
        let (rgb, mask) = s.render_canonical(32);
        let (v, m) = render_view(&rgb, &mask, 0.0).unwrap();
        assert_eq!(m, mask);
        assert!(v.max_abs_diff(&rgb) < 1e-15);
    }

    #[test]
    fn background_is_white_in_every_view() {
        let s = SpriteInstance::generate(2, 4);
        let (rgb, mask) = s.render_canonical(32);
        for theta in [0.0, 35.0, 90.0, 215.0] {
            let (v, m) = render_view(&rgb, &mask, theta).unwrap();
            let plane = 32 * 32;
            for p in 0..plane {
                if m.data()[p] == 0.0 {
                    assert!((0..3).all(|c| v.data()[c * plane + p] == 1.0));
                }
            }
        }
    }

    #[test]
    fn degenerate_single_view_manifest() {
        let manifest = DatasetManifest {
            format_version: 1,
            seed: 0,
            instance_count: 1,
            image_size: 32,
            azimuth_step_deg: 5,
            azimuth_bins: vec![0],
            deltas: delta_vocabulary(),
            view_file: "view_{bin}.png".into(),
            mask_file: "mask_{bin}.png".into(),
            instances: vec![InstanceEntry {
                id: 0,
                split: Split::Train,
                dir: "inst_0".into(),
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = sample_tuple_single(&manifest, Split::Train, &mut rng).unwrap();
            assert_eq!(t.sources[0], SourceView { bin: 0, delta: 0 });
            assert_eq!(t.target_bin, 0);
        }
        assert!(sample_tuple_single(&manifest, Split::Test, &mut rng).is_err());
    }

    #[test]
    fn split_is_exact_per_block() {
        for count in [5, 20, 200] {
            let train = split_assignment(11, count)
                .iter()
                .filter(|&&s| s == Split::Train)
                .count();
            assert_eq!(train, count * 4 / 5);
        }
        let long = split_assignment(11, 37);
        assert_eq!(&split_assignment(11, 20)[..], &long[..20]);
    }
}
