//! Forward kernels and the raw backward rules the autodiff graph uses.
//!
//! Layout conventions: feature maps are `C×H×W`, linear weights used with
//! [`matmul`] are `in×out`, 1×1 convolution weights are `out×in`, 3×3
//! convolution weights are `out×in×3×3` and depthwise weights are `C×3×3`.
//! All 3×3 convolutions use zero padding of one pixel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("inner extents {k} and {k2} differ")));
    }
    Tensor::from_kernel("matmul", vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(row, av, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// Gradients of `C = A·B` given `dC`; returns `(dA, dB)`.
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] = dot(dc_row, &b[p * n..(p + 1) * n]);
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(&mut db[p * n..(p + 1) * n], av, dc_row);
            }
        }
    }
    (da, db)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("transpose")?;
    Tensor::from_kernel("transpose", vec![n, m], transpose_raw(x.data(), m, n))
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

pub fn conv_1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("conv_1x1")?;
    let (co, ci) = weight.dims2("conv_1x1")?;
    if ci != c {
        return Err(Error::dim("conv_1x1", format!("weight expects {ci} input channels, input has {c}")));
    }
    if bias.numel() != co {
        return Err(Error::dim("conv_1x1", format!("bias has {} values for {co} channels", bias.numel())));
    }
    let mut out = matmul_raw(weight.data(), x.data(), co, c, h * w);
    add_channel_bias(&mut out, bias.data(), h * w);
    Tensor::from_kernel("conv_1x1", vec![co, h, w], out)
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv_1x1_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    c_in: usize,
    c_out: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; c_in * plane];
    let mut dw = vec![0.0; c_out * c_in];
    let mut db = vec![0.0; c_out];
    for co in 0..c_out {
        let dy_p = &dy[co * plane..(co + 1) * plane];
        db[co] = dy_p.iter().sum();
        for ci in 0..c_in {
            let x_p = &x[ci * plane..(ci + 1) * plane];
            dw[co * c_in + ci] = dot(dy_p, x_p);
            axpy(&mut dx[ci * plane..(ci + 1) * plane], weight[co * c_in + ci], dy_p);
        }
    }
    (dx, dw, db)
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

/// Output extent of a padded 3×3 convolution.
pub fn conv3x3_out_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

#[derive(Clone, Copy)]
struct Tap {
    ky: usize,
    kx: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Tap {
    /// Valid output range along one axis for kernel offset `k`.
    fn range(k: usize, stride: usize, extent: usize, out_extent: usize) -> Option<(usize, usize)> {
        let lo = if k == 0 { 1 } else { 0 };
        if extent < k {
            return None;
        }
        let hi = ((extent - k) / stride).min(out_extent - 1);
        (lo <= hi).then_some((lo, hi))
    }

    fn rows(&self) -> Option<(usize, usize)> {
        Self::range(self.ky, self.stride, self.h, self.ho)
    }

    fn cols(&self) -> Option<(usize, usize)> {
        Self::range(self.kx, self.stride, self.w, self.wo)
    }

    fn forward(&self, inp: &[f64], out: &mut [f64], wv: f64) {
        let (Some((oy0, oy1)), Some((ox0, ox1))) = (self.rows(), self.cols()) else {
            return;
        };
        for oy in oy0..=oy1 {
            let iy = oy * self.stride + self.ky - 1;
            let in_row = &inp[iy * self.w..(iy + 1) * self.w];
            let out_row = &mut out[oy * self.wo..(oy + 1) * self.wo];
            if self.stride == 1 {
                let shift = ox0 + self.kx - 1;
                axpy(&mut out_row[ox0..=ox1], wv, &in_row[shift..shift + (ox1 - ox0 + 1)]);
            } else {
                for ox in ox0..=ox1 {
                    out_row[ox] += wv * in_row[ox * self.stride + self.kx - 1];
                }
            }
        }
    }

    /// Adds each output-position value back onto the input pixel it read.
    fn scatter(&self, dout: &[f64], din: &mut [f64]) {
        let (Some((oy0, oy1)), Some((ox0, ox1))) = (self.rows(), self.cols()) else {
            return;
        };
        for oy in oy0..=oy1 {
            let iy = oy * self.stride + self.ky - 1;
            let din_row = &mut din[iy * self.w..(iy + 1) * self.w];
            let dout_row = &dout[oy * self.wo..(oy + 1) * self.wo];
            for ox in ox0..=ox1 {
                din_row[ox * self.stride + self.kx - 1] += dout_row[ox];
            }
        }
    }

    /// Accumulates `din += w·dout` through this tap and returns `Σ dout·in`.
    fn backward(&self, inp: &[f64], dout: &[f64], din: &mut [f64], wv: f64) -> f64 {
        let (Some((oy0, oy1)), Some((ox0, ox1))) = (self.rows(), self.cols()) else {
            return 0.0;
        };
        let mut dw = 0.0;
        for oy in oy0..=oy1 {
            let iy = oy * self.stride + self.ky - 1;
            let in_row = &inp[iy * self.w..(iy + 1) * self.w];
            let din_row = &mut din[iy * self.w..(iy + 1) * self.w];
            let dout_row = &dout[oy * self.wo..(oy + 1) * self.wo];
            if self.stride == 1 {
                let shift = ox0 + self.kx - 1;
                let len = ox1 - ox0 + 1;
                dw += dot(&dout_row[ox0..=ox1], &in_row[shift..shift + len]);
                axpy(&mut din_row[shift..shift + len], wv, &dout_row[ox0..=ox1]);
            } else {
                for ox in ox0..=ox1 {
                    let ix = ox * self.stride + self.kx - 1;
                    dw += dout_row[ox] * in_row[ix];
                    din_row[ix] += wv * dout_row[ox];
                }
            }
        }
        dw
    }
}

/// Patch matrix `(c·9) × (ho·wo)` of a zero-padded 3×3 window.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv3x3_out_extent(h, stride), conv3x3_out_extent(w, stride));
    let plane = ho * wo;
    let mut cols = vec![0.0; c * 9 * plane];
    for ci in 0..c {
        let in_p = &x[ci * h * w..(ci + 1) * h * w];
        for k in 0..9 {
            let tap = Tap { ky: k / 3, kx: k % 3, stride, h, w, ho, wo };
            let row = &mut cols[(ci * 9 + k) * plane..(ci * 9 + k + 1) * plane];
            tap.forward(in_p, row, 1.0);
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv3x3_out_extent(h, stride), conv3x3_out_extent(w, stride));
    let plane = ho * wo;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let din_p = &mut dx[ci * h * w..(ci + 1) * h * w];
        for k in 0..9 {
            let tap = Tap { ky: k / 3, kx: k % 3, stride, h, w, ho, wo };
            tap.scatter(&cols[(ci * 9 + k) * plane..(ci * 9 + k + 1) * plane], din_p);
        }
    }
    dx
}

/// Dense 3×3 convolution with zero padding 1 and the given stride.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("conv3x3")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::dim("conv3x3", format!("weight {ws:?} incompatible with {c} input channels")));
    }
    let co = ws[0];
    if bias.numel() != co {
        return Err(Error::dim("conv3x3", format!("bias has {} values for {co} channels", bias.numel())));
    }
    if stride == 0 {
        return Err(Error::Config("conv3x3 stride must be positive".into()));
    }
    let (ho, wo) = (conv3x3_out_extent(h, stride), conv3x3_out_extent(w, stride));
    let cols = im2col(x.data(), c, h, w, stride);
    let mut out = matmul_raw(weight.data(), &cols, co, c * 9, ho * wo);
    add_channel_bias(&mut out, bias.data(), ho * wo);
    Tensor::from_kernel("conv3x3", vec![co, ho, wo], out)
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

pub(crate) fn conv3x3_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: &ConvDims,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (conv3x3_out_extent(d.h, d.stride), conv3x3_out_extent(d.w, d.stride));
    let plane = ho * wo;
    let k = d.c_in * 9;
    let cols = im2col(x, d.c_in, d.h, d.w, d.stride);
    let mut dw = vec![0.0; d.c_out * k];
    for o in 0..d.c_out {
        let dy_row = &dy[o * plane..(o + 1) * plane];
        for p in 0..k {
            dw[o * k + p] = dot(dy_row, &cols[p * plane..(p + 1) * plane]);
        }
    }
    let db = (0..d.c_out).map(|o| dy[o * plane..(o + 1) * plane].iter().sum()).collect();
    let dx = need_dx.then(|| {
        let mut dcols = cols;
        dcols.fill(0.0);
        for o in 0..d.c_out {
            let dy_row = &dy[o * plane..(o + 1) * plane];
            for p in 0..k {
                axpy(&mut dcols[p * plane..(p + 1) * plane], weight[o * k + p], dy_row);
            }
        }
        col2im(&dcols, d.c_in, d.h, d.w, d.stride)
    });
    (dx, dw, db)
}

/// Channel-wise 3×3 convolution, stride 1, zero padding 1.
pub fn dwconv_3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("dwconv_3x3")?;
    if weight.shape() != [c, 3, 3] {
        return Err(Error::dim("dwconv_3x3", format!("weight {:?} for {c} channels", weight.shape())));
    }
    if bias.numel() != c {
        return Err(Error::dim("dwconv_3x3", format!("bias has {} values for {c} channels", bias.numel())));
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let in_p = &x.data()[ch * h * w..(ch + 1) * h * w];
        let out_p = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let tap = Tap { ky, kx, stride: 1, h, w, ho: h, wo: w };
                tap.forward(in_p, out_p, weight.data()[(ch * 3 + ky) * 3 + kx]);
            }
        }
    }
    add_channel_bias(&mut out, bias.data(), h * w);
    Tensor::from_kernel("dwconv_3x3", vec![c, h, w], out)
}

pub(crate) fn dwconv_3x3_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut dx = vec![0.0; c * plane];
    let mut dw = vec![0.0; c * 9];
    let mut db = vec![0.0; c];
    for ch in 0..c {
        let in_p = &x[ch * plane..(ch + 1) * plane];
        let dy_p = &dy[ch * plane..(ch + 1) * plane];
        let din_p = &mut dx[ch * plane..(ch + 1) * plane];
        db[ch] = dy_p.iter().sum();
        for ky in 0..3 {
            for kx in 0..3 {
                let idx = (ch * 3 + ky) * 3 + kx;
                let tap = Tap { ky, kx, stride: 1, h, w, ho: h, wo: w };
                dw[idx] += tap.backward(in_p, dy_p, din_p, weight[idx]);
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Normalized values and reciprocal standard deviations of contiguous blocks.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn block_normalize(x: &[f64], block: usize, eps: f64) -> NormCache {
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / block);
    for (src, dst) in x.chunks(block).zip(xhat.chunks_mut(block)) {
        let n = block as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    NormCache { xhat, rstd }
}

pub(crate) fn block_normalize_backward(dxhat: &[f64], cache: &NormCache, block: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    let n = block as f64;
    for (b, ((g, xh), out)) in dxhat
        .chunks(block)
        .zip(cache.xhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .enumerate()
    {
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gx = dot(g, xh) / n;
        let r = cache.rstd[b];
        for i in 0..block {
            out[i] = r * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
    dx
}

pub(crate) fn group_norm_with_cache(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let (c, h, w) = x.dims3("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels not divisible into {groups} groups")));
    }
    if eps <= 0.0 {
        return Err(Error::Config("group_norm eps must be positive".into()));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim("group_norm", "affine parameters must have one value per channel"));
    }
    let plane = h * w;
    let cache = block_normalize(x.data(), (c / groups) * plane, eps);
    let mut out = cache.xhat.clone();
    for ch in 0..c {
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for v in &mut out[ch * plane..(ch + 1) * plane] {
            *v = g * *v + b;
        }
    }
    Ok((Tensor::from_kernel("group_norm", vec![c, h, w], out)?, cache))
}

/// Group normalization over `C×H×W` with per-channel affine scale and shift.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    group_norm_with_cache(x, groups, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_with_cache(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let d = *x.shape().last().expect("tensor has rank >= 1");
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", format!("affine parameters must have {d} values")));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let cache = block_normalize(x.data(), d, eps);
    let mut out = cache.xhat.clone();
    for row in out.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = g * *v + b;
        }
    }
    Ok((Tensor::from_kernel("layer_norm", x.shape().to_vec(), out)?, cache))
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_cache(x, gamma, beta, eps).map(|(t, _)| t)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    map("sigmoid", x, sigmoid_scalar)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    map("gelu", x, gelu_scalar)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().expect("tensor has rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_kernel("softmax", x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let s = dot(yr, dyr);
        for i in 0..d {
            dxr[i] = yr[i] * (dyr[i] - s);
        }
    }
    dx
}

pub(crate) fn map(op: &'static str, x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::from_kernel(op, x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Rearranges `C·r²×H×W` into `C×rH×rW`. Input channel `c·r² + i·r + j`
/// lands at offset `(i, j)` inside each `r×r` output cell.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (cr, h, w) = x.dims3("pixel_shuffle")?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::dim("pixel_shuffle", format!("{cr} channels not divisible by r²={}", r * r)));
    }
    let c = cr / (r * r);
    let mut out = vec![0.0; x.numel()];
    shuffle_apply(c, r, h, w, |src, dst| out[dst] = x.data()[src]);
    Tensor::from_kernel("pixel_shuffle", vec![c, h * r, w * r], out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, hr, wr) = x.dims3("pixel_unshuffle")?;
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::dim("pixel_unshuffle", format!("spatial extents not divisible by {r}")));
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = vec![0.0; x.numel()];
    shuffle_apply(c, r, h, w, |src, dst| out[src] = x.data()[dst]);
    Tensor::from_kernel("pixel_unshuffle", vec![c * r * r, h, w], out)
}

/// Visits every (shuffled-input index, output index) pair.
pub(crate) fn shuffle_apply(c: usize, r: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src_c = ch * r * r + i * r + j;
                for y in 0..h {
                    for xx in 0..w {
                        let src = (src_c * h + y) * w + xx;
                        let dst = (ch * oh + y * r + i) * ow + xx * r + j;
                        f(src, dst);
                    }
                }
            }
        }
    }
}

/// Per-output-index source taps `(i0, i1, weight of i1)` for half-pixel-center
/// linear interpolation.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` map, half-pixel centers (align-corners false).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize", "target extents must be >= 1"));
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            let row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                row[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_kernel("bilinear_resize", vec![c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &dy[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`, computed
/// in the overflow-free logit form.
pub fn bce_with_logits_mean(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.5]);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        assert_eq!(matmul(&t(&[1, 1], &[2.0]), &t(&[1, 1], &[3.0])).unwrap().data(), &[6.0]);
        assert!(matches!(
            matmul(&a, &t(&[2, 1], &[1.0, 1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_1x1_identity_and_sum() {
        let x = Tensor::from_fn([2, 2, 3], |i| i as f64 * 0.1).unwrap();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv_1x1(&x, &eye, &Tensor::zeros([2])).unwrap(), x);
        let halves = Tensor::full([2, 2, 2], 0.5);
        let y = conv_1x1(&halves, &t(&[1, 2], &[1.0, 1.0]), &Tensor::zeros([1])).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
        assert!(conv_1x1(&x, &t(&[1, 3], &[1.0; 3]), &Tensor::zeros([1])).is_err());
    }

    #[test]
    fn dwconv_center_kernel_is_identity() {
        let x = Tensor::from_fn([2, 4, 5], |i| (i as f64).sin()).unwrap();
        let mut w = vec![0.0; 18];
        w[4] = 1.0;
        w[13] = 1.0;
        let y = dwconv_3x3(&x, &t(&[2, 3, 3], &w), &Tensor::zeros([2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dwconv_all_ones_center_and_corner() {
        let x = Tensor::full([1, 3, 3], 1.0);
        let y = dwconv_3x3(&x, &Tensor::full([1, 3, 3], 1.0), &Tensor::zeros([1])).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv3x3_stride_two_extent() {
        let x = Tensor::full([1, 8, 8], 1.0);
        let y = conv3x3(&x, &Tensor::full([2, 1, 3, 3], 1.0), &Tensor::zeros([2]), 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        // top-left output sees a 2×2 window of the padded input
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[5], 9.0);
    }

    #[test]
    fn group_norm_constant_input_and_bad_groups() {
        let x = Tensor::full([4, 2, 2], 3.0);
        let y = group_norm(&x, 2, &Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            group_norm(&x, 3, &Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn group_norm_two_values() {
        let x = t(&[2, 1, 1], &[1.0, 3.0]);
        let y = group_norm(&x, 1, &Tensor::full([2], 1.0), &Tensor::zeros([2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_closed_forms() {
        let ones = Tensor::full([2], 1.0);
        let zeros = Tensor::zeros([2]);
        let y = layer_norm(&t(&[1, 2], &[0.0, 2.0]), &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let c = layer_norm(&Tensor::full([1, 4], 7.0), &Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-5)
            .unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(gelu_scalar(0.0), 0.0);
        let s = softmax(&Tensor::zeros([1, 3])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn pixel_shuffle_cell_ordering() {
        let x = t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&t(&[3, 1, 1], &[0.0; 3]), 2).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap(), x);
        let c = bilinear_resize(&Tensor::full([1, 3, 3], 2.5), 7, 5).unwrap();
        assert!(c.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let l = bce_with_logits_mean(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
