//! Layer primitives with hand-written backward passes.
//!
//! Convolutions are cross-correlations with zero padding. Both `conv2d` and
//! `upconv2d` unfold the whole batch into one column matrix and issue a single
//! GEMM, so per-example results do not depend on the batch they were computed in.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight and bias of one learnable layer.
///
/// Shapes: conv `(C_out, C_in, k, k)`, upconv `(C_in, C_out, k, k)`,
/// fully connected `(D_out, D_in)`; the bias holds one entry per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn new(name: impl Into<String>, weight: Tensor, bias: Tensor) -> Self {
        LayerParams {
            name: name.into(),
            weight,
            bias,
        }
    }

    /// Zero tensors with this layer's shapes, used as gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        LayerParams {
            name: self.name.clone(),
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Gradients produced by a layer's backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub grad_input: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

/// C = A·B + beta·C with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Stride extents are checked by the callers' shape validation; the asserts
    // guard the raw pointer arithmetic inside dgemm.
    let extent =
        |rows: usize, cols: usize, (rs, cs): (isize, isize)| (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1;
    assert!(a.len() >= extent(m, k, a_strides));
    assert!(b.len() >= extent(k, n, b_strides));
    assert!(c.len() >= extent(m, n, c_strides));
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Geometry of a strided convolution from a `(c, h, w)` image to an `(oh, ow)` grid.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Unfold {
    fn new(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::config(format!(
                "kernel {k} with pad {pad} does not fit a {h}x{w} input"
            )));
        }
        Ok(Unfold {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Source index along one axis for output position `o` and kernel tap `t`.
    fn source(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    /// `(n, c, h, w)` image → `[c·k·k, n·oh·ow]` column matrix.
    fn im2col(&self, image: &[f64]) -> Vec<f64> {
        let ncols = self.cols();
        let plane = self.oh * self.ow;
        let mut cols = vec![0.0; self.rows() * ncols];
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    for n in 0..self.n {
                        let src = &image[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                        let dst = &mut dst_row[n * plane..(n + 1) * plane];
                        for oy in 0..self.oh {
                            let Some(iy) = self.source(oy, ky, self.h) else {
                                continue;
                            };
                            let src_row = &src[iy * self.w..(iy + 1) * self.w];
                            let dst_line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                            for (ox, d) in dst_line.iter_mut().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.w) {
                                    *d = src_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatter-add columns back into an `(n, c, h, w)` image.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let ncols = self.cols();
        let plane = self.oh * self.ow;
        let mut image = vec![0.0; self.n * self.c * self.h * self.w];
        for n in 0..self.n {
            for c in 0..self.c {
                let dst = &mut image[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let row = (c * self.k + ky) * self.k + kx;
                        let src = &cols[row * ncols + n * plane..][..plane];
                        for oy in 0..self.oh {
                            let Some(iy) = self.source(oy, ky, self.h) else {
                                continue;
                            };
                            for ox in 0..self.ow {
                                if let Some(ix) = self.source(ox, kx, self.w) {
                                    dst[iy * self.w + ix] += src[oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        image
    }
}

/// `(n, c, p)` → `[c, n·p]`.
fn to_channel_major(data: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&data[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[c, n·p]` → `(n, c, p)`.
fn from_channel_major(data: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&data[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

fn check_bias(params: &LayerParams, units: usize) -> Result<()> {
    params.bias.ensure_shape(&[units], &format!("{} bias", params.name))
}

fn conv_geometry(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<(Unfold, usize)> {
    let (n, c, h, w) = input.dims4("conv2d input")?;
    let (c_out, c_w, k, k2) = params.weight.dims4("conv2d weight")?;
    if c_w != c || k != k2 {
        return Err(Error::config(format!(
            "{}: weight {:?} does not match input {:?}",
            params.name,
            params.weight.shape(),
            input.shape()
        )));
    }
    check_bias(params, c_out)?;
    Ok((Unfold::new(n, c, h, w, k, stride, pad)?, c_out))
}

/// Strided cross-correlation with zero padding.
///
/// Output is `(N, C_out, ⌊(H+2·pad−k)/stride⌋+1, ⌊(W+2·pad−k)/stride⌋+1)`.
pub fn conv2d(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    let (g, c_out) = conv_geometry(input, params, stride, pad)?;
    let cols = g.im2col(input.data());
    let (kdim, ncols) = (g.rows(), g.cols());
    let mut out = vec![0.0; c_out * ncols];
    for (co, row) in out.chunks_mut(ncols.max(1)).enumerate() {
        row.fill(params.bias.data()[co]);
    }
    gemm(
        c_out,
        kdim,
        ncols,
        params.weight.data(),
        (kdim as isize, 1),
        &cols,
        (ncols as isize, 1),
        1.0,
        &mut out,
        (ncols as isize, 1),
    );
    let plane = g.oh * g.ow;
    let out = Tensor::new(&[g.n, c_out, g.oh, g.ow], from_channel_major(&out, g.n, c_out, plane))?;
    out.ensure_finite(&params.name)?;
    Ok(out)
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let (g, c_out) = conv_geometry(input, params, stride, pad)?;
    grad_out.ensure_shape(&[g.n, c_out, g.oh, g.ow], "conv2d grad_out")?;
    let (kdim, ncols) = (g.rows(), g.cols());
    let cols = g.im2col(input.data());
    let grad_cm = to_channel_major(grad_out.data(), g.n, c_out, g.oh * g.ow);

    let grad_bias: Vec<f64> = grad_cm
        .chunks(ncols.max(1))
        .take(c_out)
        .map(|row| row.iter().sum())
        .collect();
    let mut grad_weight = vec![0.0; c_out * kdim];
    gemm(
        c_out,
        ncols,
        kdim,
        &grad_cm,
        (ncols as isize, 1),
        &cols,
        (1, ncols as isize),
        0.0,
        &mut grad_weight,
        (kdim as isize, 1),
    );
    let mut grad_cols = vec![0.0; kdim * ncols];
    gemm(
        kdim,
        c_out,
        ncols,
        params.weight.data(),
        (1, kdim as isize),
        &grad_cm,
        (ncols as isize, 1),
        0.0,
        &mut grad_cols,
        (ncols as isize, 1),
    );
    Ok(LayerGrads {
        grad_input: Tensor::new(input.shape(), g.col2im(&grad_cols))?,
        grad_weight: Tensor::new(params.weight.shape(), grad_weight)?,
        grad_bias: Tensor::new(&[c_out], grad_bias)?,
    })
}

fn upconv_geometry(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<(Unfold, usize)> {
    let (n, c, h, w) = input.dims4("upconv2d input")?;
    let (c_w, c_out, k, k2) = params.weight.dims4("upconv2d weight")?;
    if c_w != c || k != k2 {
        return Err(Error::config(format!(
            "{}: weight {:?} does not match input {:?}",
            params.name,
            params.weight.shape(),
            input.shape()
        )));
    }
    check_bias(params, c_out)?;
    if stride == 0 || h == 0 || w == 0 || (h - 1) * stride + k < 2 * pad + 1 || (w - 1) * stride + k < 2 * pad + 1 {
        return Err(Error::config(format!(
            "{}: upconv with k={k}, stride={stride}, pad={pad} yields an empty output",
            params.name
        )));
    }
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (w - 1) * stride + k - 2 * pad;
    // The forward conv of the same geometry maps (c_out, oh, ow) back onto (c, h, w).
    let g = Unfold::new(n, c_out, oh, ow, k, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (h, w));
    Ok((g, c))
}

/// Transposed convolution: the adjoint of `conv2d` with the same weight, stride and pad,
/// plus a per-output-channel bias. Output spatial size is `(H−1)·stride − 2·pad + k`.
pub fn upconv2d(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    let (g, c_in) = upconv_geometry(input, params, stride, pad)?;
    let (kdim, ncols) = (g.rows(), g.cols());
    let x_cm = to_channel_major(input.data(), g.n, c_in, g.oh * g.ow);
    let mut cols = vec![0.0; kdim * ncols];
    gemm(
        kdim,
        c_in,
        ncols,
        params.weight.data(),
        (1, kdim as isize),
        &x_cm,
        (ncols as isize, 1),
        0.0,
        &mut cols,
        (ncols as isize, 1),
    );
    let mut out = g.col2im(&cols);
    let plane = g.h * g.w;
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = params.bias.data()[i % g.c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    let out = Tensor::new(&[g.n, g.c, g.h, g.w], out)?;
    out.ensure_finite(&params.name)?;
    Ok(out)
}

pub fn upconv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let (g, c_in) = upconv_geometry(input, params, stride, pad)?;
    grad_out.ensure_shape(&[g.n, g.c, g.h, g.w], "upconv2d grad_out")?;
    let (kdim, ncols) = (g.rows(), g.cols());
    let grad_cols = g.im2col(grad_out.data());
    let mut grad_in_cm = vec![0.0; c_in * ncols];
    gemm(
        c_in,
        kdim,
        ncols,
        params.weight.data(),
        (kdim as isize, 1),
        &grad_cols,
        (ncols as isize, 1),
        0.0,
        &mut grad_in_cm,
        (ncols as isize, 1),
    );
    let x_cm = to_channel_major(input.data(), g.n, c_in, g.oh * g.ow);
    let mut grad_weight = vec![0.0; c_in * kdim];
    gemm(
        c_in,
        ncols,
        kdim,
        &x_cm,
        (ncols as isize, 1),
        &grad_cols,
        (1, ncols as isize),
        0.0,
        &mut grad_weight,
        (kdim as isize, 1),
    );
    let plane = g.h * g.w;
    let mut grad_bias = vec![0.0; g.c];
    for (i, chunk) in grad_out.data().chunks(plane).enumerate() {
        grad_bias[i % g.c] += chunk.iter().sum::<f64>();
    }
    Ok(LayerGrads {
        grad_input: Tensor::new(input.shape(), from_channel_major(&grad_in_cm, g.n, c_in, g.oh * g.ow))?,
        grad_weight: Tensor::new(params.weight.shape(), grad_weight)?,
        grad_bias: Tensor::new(&[g.c], grad_bias)?,
    })
}

fn fc_dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize, usize)> {
    let (n, d_in) = input.dims2("fully_connected input")?;
    let (d_out, d_w) = params.weight.dims2("fully_connected weight")?;
    if d_w != d_in {
        return Err(Error::config(format!(
            "{}: weight expects {d_w} inputs, got {d_in}",
            params.name
        )));
    }
    check_bias(params, d_out)?;
    Ok((n, d_in, d_out))
}

/// Affine map `W·x + b` applied to each batch row of an `(N, D_in)` input.
pub fn fully_connected(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (n, d_in, d_out) = fc_dims(input, params)?;
    let mut out: Vec<f64> = (0..n).flat_map(|_| params.bias.data().iter().copied()).collect();
    gemm(
        n,
        d_in,
        d_out,
        input.data(),
        (d_in as isize, 1),
        params.weight.data(),
        (1, d_in as isize),
        1.0,
        &mut out,
        (d_out as isize, 1),
    );
    let out = Tensor::new(&[n, d_out], out)?;
    out.ensure_finite(&params.name)?;
    Ok(out)
}

pub fn fully_connected_backward(input: &Tensor, params: &LayerParams, grad_out: &Tensor) -> Result<LayerGrads> {
    let (n, d_in, d_out) = fc_dims(input, params)?;
    grad_out.ensure_shape(&[n, d_out], "fully_connected grad_out")?;
    let mut grad_input = vec![0.0; n * d_in];
    gemm(
        n,
        d_out,
        d_in,
        grad_out.data(),
        (d_out as isize, 1),
        params.weight.data(),
        (d_in as isize, 1),
        0.0,
        &mut grad_input,
        (d_in as isize, 1),
    );
    let mut grad_weight = vec![0.0; d_out * d_in];
    gemm(
        d_out,
        n,
        d_in,
        grad_out.data(),
        (1, d_out as isize),
        input.data(),
        (d_in as isize, 1),
        0.0,
        &mut grad_weight,
        (d_in as isize, 1),
    );
    let mut grad_bias = vec![0.0; d_out];
    for row in grad_out.data().chunks(d_out.max(1)) {
        for (b, g) in grad_bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(LayerGrads {
        grad_input: Tensor::new(&[n, d_in], grad_input)?,
        grad_weight: Tensor::new(params.weight.shape(), grad_weight)?,
        grad_bias: Tensor::new(&[d_out], grad_bias)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where the input is strictly positive; the subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape(input.shape(), "relu grad_out")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Products of the dimensions before and after `axis`.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// Concatenates `a` and `b` along `axis`; every other dimension must agree.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || axis >= sa.len() {
        return Err(Error::config(format!(
            "concat: incompatible ranks {sa:?} and {sb:?} on axis {axis}"
        )));
    }
    if sa.iter().zip(sb).enumerate().any(|(d, (x, y))| d != axis && x != y) {
        return Err(Error::config(format!(
            "concat: shapes {sa:?} and {sb:?} differ off axis {axis}"
        )));
    }
    let (outer, inner) = outer_inner(sa, axis);
    let (la, lb) = (sa[axis] * inner, sb[axis] * inner);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * la..(o + 1) * la]);
        data.extend_from_slice(&b.data()[o * lb..(o + 1) * lb]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Tensor::new(&shape, data)
}

/// Inverse of `concat`: splits `grad_out` after the first `first_len` entries along `axis`.
pub fn concat_backward(grad_out: &Tensor, first_len: usize, axis: usize) -> Result<(Tensor, Tensor)> {
    let shape = grad_out.shape();
    if axis >= shape.len() || first_len > shape[axis] {
        return Err(Error::config(format!(
            "concat_backward: cannot split {shape:?} at {first_len} on axis {axis}"
        )));
    }
    let (outer, inner) = outer_inner(shape, axis);
    let (la, lb) = (first_len * inner, (shape[axis] - first_len) * inner);
    let mut a = Vec::with_capacity(outer * la);
    let mut b = Vec::with_capacity(outer * lb);
    for o in 0..outer {
        let row = &grad_out.data()[o * (la + lb)..(o + 1) * (la + lb)];
        a.extend_from_slice(&row[..la]);
        b.extend_from_slice(&row[la..]);
    }
    let mut shape_a = shape.to_vec();
    shape_a[axis] = first_len;
    let mut shape_b = shape.to_vec();
    shape_b[axis] -= first_len;
    Ok((Tensor::new(&shape_a, a)?, Tensor::new(&shape_b, b)?))
}
