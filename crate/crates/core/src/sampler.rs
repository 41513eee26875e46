//! Differentiable bilinear sampling.
//!
//! A [`FlowField`] stores, for every target pixel `(u, v)`, an offset `(Δx, Δy)` in
//! source-pixel units; the absolute sampling location is `(u + Δx, v + Δy)`. The
//! output at a target pixel is `Σ_q I(q)·(1−|x−x_q|)·(1−|y−y_q|)` over the four
//! integer neighbours `q` of the sampling location.
//!
//! Two border and coordinate conventions are choices of this crate:
//! neighbours outside the source image contribute zero (no clamping), and
//! coordinates are in pixels rather than normalized to `[-1, 1]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-target-pixel sampling offsets, shape `(N, 2, H, W)`; channel 0 is Δx, channel 1 is Δy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    offsets: Tensor,
}

impl FlowField {
    pub fn new(offsets: Tensor) -> Result<Self> {
        let (_, c, _, _) = offsets.dims4("flow field")?;
        if c != 2 {
            return Err(Error::config(format!("flow field needs 2 channels, got {c}")));
        }
        Ok(FlowField { offsets })
    }

    /// The identity warp.
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField {
            offsets: Tensor::zeros(&[n, 2, h, w]),
        }
    }

    pub fn constant(n: usize, h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let plane = h * w;
        FlowField {
            offsets: Tensor::from_fn(&[n, 2, h, w], |i| if (i / plane).is_multiple_of(2) { dx } else { dy }),
        }
    }

    /// Builds offsets from absolute source coordinates of shape `(N, 2, H, W)`.
    pub fn from_absolute(coords: &Tensor) -> Result<Self> {
        let (n, c, h, w) = coords.dims4("absolute coordinates")?;
        if c != 2 {
            return Err(Error::config("absolute coordinates need 2 channels"));
        }
        let grid = identity_grid(h, w);
        let plane = 2 * h * w;
        let data = coords
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a - grid.coords.data()[i % plane])
            .collect();
        FlowField::new(Tensor::new(&[n, 2, h, w], data)?)
    }

    /// Absolute sampling coordinates `identity + offsets`.
    pub fn to_absolute(&self) -> Tensor {
        let (_, _, h, w) = self.dims();
        let grid = identity_grid(h, w);
        let plane = 2 * h * w;
        Tensor::from_fn(self.offsets.shape(), |i| {
            self.offsets.data()[i] + grid.coords.data()[i % plane]
        })
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn into_offsets(self) -> Tensor {
        self.offsets
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.offsets.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Integer pixel coordinates: `coords[0][v][u] = u`, `coords[1][v][u] = v`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityGrid {
    pub coords: Tensor,
}

pub fn identity_grid(h: usize, w: usize) -> IdentityGrid {
    let plane = h * w;
    IdentityGrid {
        coords: Tensor::from_fn(&[2, h, w], |i| {
            let (ch, p) = (i / plane, i % plane);
            if ch == 0 {
                (p % w) as f64
            } else {
                (p / w) as f64
            }
        }),
    }
}

fn check_shapes(source: &Tensor, flow: &FlowField) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = source.dims4("sampler source")?;
    let (fn_, _, fh, fw) = flow.dims();
    if (fn_, fh, fw) != (n, h, w) {
        return Err(Error::config(format!(
            "flow {:?} does not match source {:?}",
            flow.offsets.shape(),
            source.shape()
        )));
    }
    Ok((n, c, h, w))
}

/// The four neighbours of a sampling location and their bilinear weights.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

impl Footprint {
    fn at(x: f64, y: f64) -> Self {
        let (xf, yf) = (x.floor(), y.floor());
        Footprint {
            x0: xf as isize,
            y0: yf as isize,
            fx: x - xf,
            fy: y - yf,
        }
    }

    /// `(dx, dy, weight)` for the top-left, top-right, bottom-left and bottom-right neighbours.
    fn taps(&self) -> [(isize, isize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ]
    }
}

fn pixel(plane: &[f64], h: usize, w: usize, x: isize, y: isize) -> f64 {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Samples `source` at `identity + flow` with a bilinear kernel and a zero border.
pub fn bilinear_sample(source: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (n, c, h, w) = check_shapes(source, flow)?;
    let plane = h * w;
    let mut out = vec![0.0; n * c * plane];
    out.par_chunks_mut((c * plane).max(1))
        .enumerate()
        .for_each(|(ni, out_n)| {
            let src_n = &source.data()[ni * c * plane..][..c * plane];
            let off = &flow.offsets.data()[ni * 2 * plane..][..2 * plane];
            for p in 0..plane {
                let x = (p % w) as f64 + off[p];
                let y = (p / w) as f64 + off[plane + p];
                let fp = Footprint::at(x, y);
                for ch in 0..c {
                    let src = &src_n[ch * plane..][..plane];
                    let mut acc = 0.0;
                    for (dx, dy, wgt) in fp.taps() {
                        if wgt != 0.0 {
                            acc += wgt * pixel(src, h, w, fp.x0 + dx, fp.y0 + dy);
                        }
                    }
                    out_n[ch * plane + p] = acc;
                }
            }
        });
    let out = Tensor::new(source.shape(), out)?;
    out.ensure_finite("bilinear_sample")?;
    Ok(out)
}

/// Gradients of `bilinear_sample` with respect to the source image and the flow offsets.
#[derive(Debug, Clone)]
pub struct SamplerGrads {
    pub grad_source: Tensor,
    pub grad_flow: Tensor,
}

/// Backward pass of [`bilinear_sample`]. The coordinate derivative of the kernel is
/// taken as 0 where a sampling coordinate is an exact integer.
pub fn bilinear_sample_backward(source: &Tensor, flow: &FlowField, grad_out: &Tensor) -> Result<SamplerGrads> {
    let (n, c, h, w) = check_shapes(source, flow)?;
    grad_out.ensure_shape(source.shape(), "bilinear_sample grad_out")?;
    let plane = h * w;
    let mut grad_source = vec![0.0; n * c * plane];
    let mut grad_flow = vec![0.0; n * 2 * plane];
    grad_source
        .par_chunks_mut((c * plane).max(1))
        .zip(grad_flow.par_chunks_mut((2 * plane).max(1)))
        .enumerate()
        .for_each(|(ni, (gs_n, gf_n))| {
            let src_n = &source.data()[ni * c * plane..][..c * plane];
            let go_n = &grad_out.data()[ni * c * plane..][..c * plane];
            let off = &flow.offsets.data()[ni * 2 * plane..][..2 * plane];
            for p in 0..plane {
                let x = (p % w) as f64 + off[p];
                let y = (p / w) as f64 + off[plane + p];
                let fp = Footprint::at(x, y);
                let (mut gx, mut gy) = (0.0, 0.0);
                for ch in 0..c {
                    let g = go_n[ch * plane + p];
                    if g == 0.0 {
                        continue;
                    }
                    let src = &src_n[ch * plane..][..plane];
                    let gs = &mut gs_n[ch * plane..][..plane];
                    for (dx, dy, wgt) in fp.taps() {
                        let (qx, qy) = (fp.x0 + dx, fp.y0 + dy);
                        if wgt != 0.0 && qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                            gs[qy as usize * w + qx as usize] += g * wgt;
                        }
                    }
                    let tl = pixel(src, h, w, fp.x0, fp.y0);
                    let tr = pixel(src, h, w, fp.x0 + 1, fp.y0);
                    let bl = pixel(src, h, w, fp.x0, fp.y0 + 1);
                    let br = pixel(src, h, w, fp.x0 + 1, fp.y0 + 1);
                    if fp.fx != 0.0 {
                        gx += g * ((1.0 - fp.fy) * (tr - tl) + fp.fy * (br - bl));
                    }
                    if fp.fy != 0.0 {
                        gy += g * ((1.0 - fp.fx) * (bl - tl) + fp.fx * (br - tr));
                    }
                }
                gf_n[p] = gx;
                gf_n[plane + p] = gy;
            }
        });
    Ok(SamplerGrads {
        grad_source: Tensor::new(source.shape(), grad_source)?,
        grad_flow: Tensor::new(flow.offsets.shape(), grad_flow)?,
    })
}
