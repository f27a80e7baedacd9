//! Forward and backward kernels on plain tensors.
//!
//! These functions carry no autograd bookkeeping; [`crate::autograd`] wires
//! them into the tape. Every kernel accumulates in a fixed order so results
//! are reproducible across runs and thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Float, Tensor};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, "same" padding for an odd kernel.
    pub fn same(k: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::same(k)
        }
    }
}

fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv2d_out_dims(x: Dims, w: Dims, spec: ConvSpec) -> Result<Dims> {
    let [n, c, h, wd] = x;
    let [co, cig, kh, kw] = w;
    if spec.groups == 0 || c % spec.groups != 0 || co % spec.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "channels in={c} out={co} not divisible by groups={}",
                spec.groups
            ),
        ));
    }
    if cig != c / spec.groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {cig} input channels per group, input has {}",
                c / spec.groups
            ),
        ));
    }
    let oh = conv_out_len(h, kh, spec.stride, spec.padding);
    let ow = conv_out_len(wd, kw, spec.stride, spec.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, co, oh, ow]),
        _ => Err(Error::shape(
            "conv2d",
            format!("zero-size output for input {h}x{wd}, kernel {kh}x{kw}"),
        )),
    }
}

/// Range of output columns `ox` for which `ox * stride + k - pad` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // ox*s + k - pad >= 0  =>  ox >= ceil((pad - k)/s)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // ox*s + k - pad <= len - 1
    let hi = if len + pad > k {
        ((len + pad - 1 - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let out_dims = conv2d_out_dims(x.dims(), weight.dims(), spec)?;
    let [_, c, h, w] = x.dims();
    let [co, cig, kh, kw] = weight.dims();
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries, expected {co}", b.len()),
            ));
        }
    }
    let [_, _, oh, ow] = out_dims;
    let cog = co / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let xd = x.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(out_dims);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (b_idx, o) = (plane / co, plane % co);
            let g = o / cog;
            for cil in 0..cig {
                let ci = g * cig + cil;
                let src = &xd[(b_idx * c + ci) * h * w..][..h * w];
                let wbase = (o * cig + cil) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, s, ky, p);
                    for kx in 0..kw {
                        let wv = wd[wbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(ow, w, s, kx, p);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row = &src[iy * w..][..w];
                            let drow = &mut dst[oy * ow..][..ow];
                            if s == 1 {
                                let len = ox_hi - ox_lo;
                                let sx = ox_lo + kx - p;
                                for (d, &r) in drow[ox_lo..ox_hi].iter_mut().zip(&row[sx..sx + len]) {
                                    *d += wv * r;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox] += wv * row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[o];
                for v in dst.iter_mut() {
                    *v += bv;
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.dims();
    let [co, cig, kh, kw] = weight.dims();
    let [_, _, oh, ow] = grad_out.dims();
    let cog = co / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();

    // Weight and bias gradients: one task per output channel.
    let mut gw = Tensor::zeros(weight.dims());
    gw.data_mut()
        .par_chunks_mut(cig * kh * kw)
        .enumerate()
        .for_each(|(o, dst)| {
            let g = o / cog;
            for b_idx in 0..n {
                let gplane = &gd[(b_idx * co + o) * oh * ow..][..oh * ow];
                for cil in 0..cig {
                    let ci = g * cig + cil;
                    let src = &xd[(b_idx * c + ci) * h * w..][..h * w];
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_range(oh, h, s, ky, p);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = valid_range(ow, w, s, kx, p);
                            let mut acc = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                for ox in ox_lo..ox_hi {
                                    acc += gplane[oy * ow + ox] * src[iy * w + ox * s + kx - p];
                                }
                            }
                            dst[(cil * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });

    let mut gb = Tensor::zeros([co, 1, 1, 1]);
    for o in 0..co {
        let mut acc = T::zero();
        for b_idx in 0..n {
            acc += gd[(b_idx * co + o) * oh * ow..][..oh * ow].iter().copied().sum::<T>();
        }
        gb.data_mut()[o] = acc;
    }

    // Input gradient: one task per input plane.
    let mut gx = Tensor::zeros(x.dims());
    gx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (b_idx, ci) = (plane / c, plane % c);
            let g = ci / cig;
            let cil = ci % cig;
            for ol in 0..cog {
                let o = g * cog + ol;
                let gplane = &gd[(b_idx * co + o) * oh * ow..][..oh * ow];
                let wbase = (o * cig + cil) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, s, ky, p);
                    for kx in 0..kw {
                        let wv = wd[wbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(ow, w, s, kx, p);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            if s == 1 {
                                let len = ox_hi - ox_lo;
                                let dx = iy * w + ox_lo + kx - p;
                                let grow = &gplane[oy * ow + ox_lo..][..len];
                                for (d, &g) in dst[dx..dx + len].iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    dst[iy * w + ox * s + kx - p] += wv * gplane[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    (gx, gw, gb)
}

/// Multiply-adds performed by one [`conv2d`] call.
pub fn conv2d_macs(out: Dims, weight: Dims) -> u64 {
    let [n, co, oh, ow] = out;
    let [_, cig, kh, kw] = weight;
    (n * co * oh * ow * cig * kh * kw) as u64
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub fn avg_pool<T: Float>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(Error::shape(
            "avg_pool",
            format!("window {k} larger than input {h}x{w}"),
        ));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let area = T::of((k * k) as f64);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        acc += src[(oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                dst[oy * ow + ox] = acc / area;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Float>(
    input_dims: Dims,
    grad_out: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let [_, _, h, w] = input_dims;
    let [_, _, oh, ow] = grad_out.dims();
    let area = T::of((k * k) as f64);
    let mut gx = Tensor::zeros(input_dims);
    for (plane, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let g = &grad_out.data()[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] / area;
                for ky in 0..k {
                    for kx in 0..k {
                        dst[(oy * stride + ky) * w + ox * stride + kx] += v;
                    }
                }
            }
        }
    }
    gx
}

/// Strided max pooling; padded positions never win. Returns the output and
/// the flat input index of each window's maximum (first occurrence).
pub fn max_pool<T: Float>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    if k == 0 || stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(
            "max_pool",
            format!("window {k} (pad {pad}) does not fit input {h}x{w}"),
        ));
    }
    let (oh, ow) = (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    );
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if best_i == usize::MAX || src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data_mut()[o] = best;
                arg[o] = plane * h * w + best_i;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward<T: Float>(input_dims: Dims, grad_out: &Tensor<T>, arg: &[usize]) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_dims);
    for (&i, &g) in arg.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn triangle(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Sparse interpolation weights along one axis: for every output index, the
/// contributing input indices (edge-clamped) and their normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights {
    pub in_len: usize,
    pub out_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn build(in_len: usize, out_len: usize, radius: f64, antialias: bool, kernel: fn(f64) -> f64) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let support = if antialias && scale > 1.0 { scale } else { 1.0 };
        let mut taps = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - radius * support).floor() as isize;
            let hi = (center + radius * support).ceil() as isize;
            let mut row: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let wgt = kernel((j as f64 - center) / support);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                total += wgt;
                match row.iter_mut().find(|(i, _)| *i == idx) {
                    Some(entry) => entry.1 += wgt,
                    None => row.push((idx, wgt)),
                }
            }
            if total != 1.0 {
                for entry in row.iter_mut() {
                    entry.1 /= total;
                }
            }
            taps.push(row);
        }
        AxisWeights {
            in_len,
            out_len,
            taps,
        }
    }

    /// Keys bicubic weights; the kernel is widened by the scale factor when
    /// shrinking.
    pub fn bicubic(in_len: usize, out_len: usize) -> Self {
        Self::build(in_len, out_len, 2.0, true, keys_cubic)
    }

    /// Bilinear (triangle) weights without antialiasing.
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        Self::build(in_len, out_len, 1.0, false, triangle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bicubic,
    Bilinear,
}

impl Interpolation {
    pub fn weights(self, in_len: usize, out_len: usize) -> AxisWeights {
        match self {
            Interpolation::Bicubic => AxisWeights::bicubic(in_len, out_len),
            Interpolation::Bilinear => AxisWeights::bilinear(in_len, out_len),
        }
    }
}

/// Separable resize: rows first (width axis), then columns (height axis).
pub fn resize<T: Float>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    mode: Interpolation,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.dims();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "resize",
            format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
        ));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let wy = mode.weights(h, out_h);
    let wx = mode.weights(w, out_w);
    Ok(resize_with(x, &wy, &wx))
}

pub(crate) fn resize_with<T: Float>(x: &Tensor<T>, wy: &AxisWeights, wx: &AxisWeights) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (wy.out_len, wx.out_len);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = &x.data()[plane * h * w..][..h * w];
            let mut tmp = vec![T::zero(); h * ow];
            for y in 0..h {
                for (ox, taps) in wx.taps.iter().enumerate() {
                    let mut acc = T::zero();
                    for &(ix, wgt) in taps {
                        acc += T::of(wgt) * src[y * w + ix];
                    }
                    tmp[y * ow + ox] = acc;
                }
            }
            for (oy, taps) in wy.taps.iter().enumerate() {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for &(iy, wgt) in taps {
                        acc += T::of(wgt) * tmp[iy * ow + ox];
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        });
    out
}

/// Adjoint of [`resize_with`].
pub(crate) fn resize_backward<T: Float>(
    input_dims: Dims,
    grad_out: &Tensor<T>,
    wy: &AxisWeights,
    wx: &AxisWeights,
) -> Tensor<T> {
    let [_, _, h, w] = input_dims;
    let (oh, ow) = (wy.out_len, wx.out_len);
    let mut gx = Tensor::zeros(input_dims);
    gx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let g = &grad_out.data()[plane * oh * ow..][..oh * ow];
            let mut tmp = vec![T::zero(); h * ow];
            for (oy, taps) in wy.taps.iter().enumerate() {
                for &(iy, wgt) in taps {
                    for ox in 0..ow {
                        tmp[iy * ow + ox] += T::of(wgt) * g[oy * ow + ox];
                    }
                }
            }
            for y in 0..h {
                for (ox, taps) in wx.taps.iter().enumerate() {
                    let v = tmp[y * ow + ox];
                    for &(ix, wgt) in taps {
                        dst[y * w + ix] += T::of(wgt) * v;
                    }
                }
            }
        });
    gx
}

pub fn bicubic_resize<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    resize(x, out_h, out_w, Interpolation::Bicubic)
}

pub fn bilinear_resize<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    resize(x, out_h, out_w, Interpolation::Bilinear)
}

// ---------------------------------------------------------------------------
// Rearrangements
// ---------------------------------------------------------------------------

pub fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{c} channels not divisible by {r}^2"),
        ));
    }
    let co = c / (r * r);
    Ok(Tensor::from_fn([n, co, h * r, w * r], |b, o, y, xx| {
        let (i, di, j, dj) = (y / r, y % r, xx / r, xx % r);
        x.at(b, o * r * r + di * r + dj, i, j)
    }))
}

pub fn pixel_unshuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("{h}x{w} not divisible by {r}"),
        ));
    }
    Ok(Tensor::from_fn([n, c * r * r, h / r, w / r], |b, ch, i, j| {
        let (o, rem) = (ch / (r * r), ch % (r * r));
        x.at(b, o, i * r + rem / r, j * r + rem % r)
    }))
}

pub fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.dims();
    for t in xs {
        let [tn, _, th, tw] = t.dims();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", first.dims(), t.dims()),
            ));
        }
    }
    let c: usize = xs.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in xs {
            let block = t.c() * h * w;
            data.extend_from_slice(&t.data()[b * block..][..block]);
        }
    }
    Tensor::new([n, c, h, w], data)
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Float>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if start + len > c || len == 0 {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} outside {c} channels", start + len),
        ));
    }
    let mut data = Vec::with_capacity(n * len * h * w);
    for b in 0..n {
        data.extend_from_slice(&x.data()[(b * c + start) * h * w..][..len * h * w]);
    }
    Tensor::new([n, len, h, w], data)
}

pub fn split_channels<T: Float>(x: &Tensor<T>, parts: &[usize]) -> Result<Vec<Tensor<T>>> {
    if parts.iter().sum::<usize>() != x.c() {
        return Err(Error::shape(
            "split_channels",
            format!("parts {parts:?} do not sum to {} channels", x.c()),
        ));
    }
    let mut start = 0;
    parts
        .iter()
        .map(|&len| {
            let t = slice_channels(x, start, len);
            start += len;
            t
        })
        .collect()
}

/// Swaps the last two axes of every `(n, c)` plane.
pub fn transpose2d<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    Tensor::from_fn([n, c, w, h], |b, ch, i, j| x.at(b, ch, j, i))
}

/// Batched matrix product over the trailing two axes.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, m, k] = a.dims();
    let [bn, bc, bk, p] = b.dims();
    if (n, c, k) != (bn, bc, bk) {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    let mut out = Tensor::zeros([n, c, m, p]);
    for plane in 0..n * c {
        let ad = &a.data()[plane * m * k..][..m * k];
        let bd = &b.data()[plane * k * p..][..k * p];
        let od = &mut out.data_mut()[plane * m * p..][..m * p];
        for i in 0..m {
            for j in 0..p {
                let mut acc = T::zero();
                for t in 0..k {
                    acc += ad[i * k + t] * bd[t * p + j];
                }
                od[i * p + j] = acc;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

/// Per-position statistics saved by [`layer_norm`] for its backward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T: Float> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Normalizes across channels at every spatial position, then applies the
/// per-channel affine `gamma * xhat + beta`.
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let [n, c, h, w] = x.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("affine of length {}/{} for {c} channels", gamma.len(), beta.len()),
        ));
    }
    let hw = h * w;
    let cf = T::of(c as f64);
    let mut xhat = Tensor::zeros(x.dims());
    let mut rstd = vec![T::zero(); n * hw];
    for b in 0..n {
        for pos in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + pos;
            let mut mean = T::zero();
            for ch in 0..c {
                mean += x.data()[idx(ch)];
            }
            mean /= cf;
            let mut var = T::zero();
            for ch in 0..c {
                let d = x.data()[idx(ch)] - mean;
                var += d * d;
            }
            var /= cf;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd[b * hw + pos] = r;
            for ch in 0..c {
                xhat.data_mut()[idx(ch)] = (x.data()[idx(ch)] - mean) * r;
            }
        }
    }
    let y = Tensor::from_fn(x.dims(), |b, ch, yy, xx| {
        gamma.data()[ch] * xhat.at(b, ch, yy, xx) + beta.data()[ch]
    });
    Ok((y, NormStats { xhat, rstd }))
}

pub fn layer_norm_backward<T: Float>(
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = grad_out.dims();
    let hw = h * w;
    let cf = T::of(c as f64);
    let xhat = &stats.xhat;
    let mut gx = Tensor::zeros(grad_out.dims());
    let mut ggamma = Tensor::zeros(gamma.dims());
    let mut gbeta = Tensor::zeros(gamma.dims());
    for b in 0..n {
        for pos in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + pos;
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ch in 0..c {
                let g = grad_out.data()[idx(ch)];
                let xh = xhat.data()[idx(ch)];
                ggamma.data_mut()[ch] += g * xh;
                gbeta.data_mut()[ch] += g;
                let gh = g * gamma.data()[ch];
                sum_g += gh;
                sum_gx += gh * xh;
            }
            let r = stats.rstd[b * hw + pos];
            for ch in 0..c {
                let gh = grad_out.data()[idx(ch)] * gamma.data()[ch];
                let xh = xhat.data()[idx(ch)];
                gx.data_mut()[idx(ch)] = r / cf * (cf * gh - sum_g - xh * sum_gx);
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub fn sigmoid_scalar<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Softmax along the width axis (rows of every plane).
pub fn softmax_lastdim<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.w();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn softmax_lastdim_backward<T: Float>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let w = y.w();
    let mut gx = Tensor::zeros(y.dims());
    for ((gxr, yr), gr) in gx
        .data_mut()
        .chunks_mut(w)
        .zip(y.data().chunks(w))
        .zip(grad_out.data().chunks(w))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..w {
            gxr[i] = yr[i] * (gr[i] - dot);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Channel-group shift
// ---------------------------------------------------------------------------

/// The eight unit displacements `(dy, dx)` applied to the shifted channel
/// groups, in group order.
pub const SHIFT_DIRECTIONS: [(isize, isize); 8] = [
    (0, 1),
    (0, -1),
    (1, 0),
    (-1, 0),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Displacement of channel `ch` when the first `kept` channels stay put and
/// the rest form eight equal groups.
pub fn shift_of(ch: usize, kept: usize, group: usize) -> (isize, isize) {
    if ch < kept {
        (0, 0)
    } else {
        SHIFT_DIRECTIONS[(ch - kept) / group]
    }
}

fn check_shift(c: usize, kept: usize) -> Result<usize> {
    if kept > c || !(c - kept).is_multiple_of(8) {
        return Err(Error::shape(
            "shift_channels",
            format!("{} shifted channels do not form 8 equal groups", c.saturating_sub(kept)),
        ));
    }
    Ok(((c - kept) / 8).max(1))
}

/// Moves the content of each shifted group one pixel along its direction:
/// `out[y][x] = in[y - dy][x - dx]`, zero where the source falls outside.
pub fn shift_channels<T: Float>(x: &Tensor<T>, kept: usize) -> Result<Tensor<T>> {
    let [_, c, h, w] = x.dims();
    let group = check_shift(c, kept)?;
    Ok(Tensor::from_fn(x.dims(), |b, ch, y, xx| {
        let (dy, dx) = shift_of(ch, kept, group);
        let (sy, sx) = (y as isize - dy, xx as isize - dx);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            T::zero()
        } else {
            x.at(b, ch, sy as usize, sx as usize)
        }
    }))
}

pub fn shift_channels_backward<T: Float>(grad_out: &Tensor<T>, kept: usize) -> Tensor<T> {
    let [_, c, h, w] = grad_out.dims();
    let group = ((c - kept) / 8).max(1);
    Tensor::from_fn(grad_out.dims(), |b, ch, y, xx| {
        let (dy, dx) = shift_of(ch, kept, group);
        let (sy, sx) = (y as isize + dy, xx as isize + dx);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            T::zero()
        } else {
            grad_out.at(b, ch, sy as usize, sx as usize)
        }
    })
}

// ---------------------------------------------------------------------------
// Windowed attention
// ---------------------------------------------------------------------------

/// Which axis supplies the attention tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionAxis {
    /// Tokens are pixels; features are channels.
    Spatial,
    /// Tokens are channels; features are the pixels of the window.
    Channel,
}

/// Rectangular windows tiling an `h x w` grid; edge windows may be smaller.
pub fn windows(h: usize, w: usize, size: Option<usize>) -> Vec<(usize, usize, usize, usize)> {
    let (sh, sw) = match size {
        Some(s) => (s.max(1), s.max(1)),
        None => (h, w),
    };
    let mut out = Vec::new();
    let mut y = 0;
    while y < h {
        let mut x = 0;
        while x < w {
            out.push((y, (y + sh).min(h), x, (x + sw).min(w)));
            x += sw;
        }
        y += sh;
    }
    out
}

struct WindowMats<T> {
    /// Row-major `(tokens, dim)` matrices.
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    tokens: usize,
    dim: usize,
}

fn gather_window<T: Float>(
    t: &Tensor<T>,
    b: usize,
    win: (usize, usize, usize, usize),
    axis: AttentionAxis,
) -> (Vec<T>, usize, usize) {
    let c = t.c();
    let (y0, y1, x0, x1) = win;
    let npix = (y1 - y0) * (x1 - x0);
    let mut m = Vec::with_capacity(c * npix);
    match axis {
        AttentionAxis::Spatial => {
            for y in y0..y1 {
                for x in x0..x1 {
                    for ch in 0..c {
                        m.push(t.at(b, ch, y, x));
                    }
                }
            }
            (m, npix, c)
        }
        AttentionAxis::Channel => {
            for ch in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        m.push(t.at(b, ch, y, x));
                    }
                }
            }
            (m, c, npix)
        }
    }
}

fn scatter_window<T: Float>(
    dst: &mut Tensor<T>,
    b: usize,
    win: (usize, usize, usize, usize),
    axis: AttentionAxis,
    m: &[T],
) {
    let c = dst.c();
    let (y0, y1, x0, x1) = win;
    let mut i = 0;
    match axis {
        AttentionAxis::Spatial => {
            for y in y0..y1 {
                for x in x0..x1 {
                    for ch in 0..c {
                        dst.set(b, ch, y, x, m[i]);
                        i += 1;
                    }
                }
            }
        }
        AttentionAxis::Channel => {
            for ch in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        dst.set(b, ch, y, x, m[i]);
                        i += 1;
                    }
                }
            }
        }
    }
}

fn load_window<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    b: usize,
    win: (usize, usize, usize, usize),
    axis: AttentionAxis,
) -> WindowMats<T> {
    let (qm, tokens, dim) = gather_window(q, b, win, axis);
    let (km, _, _) = gather_window(k, b, win, axis);
    let (vm, _, _) = gather_window(v, b, win, axis);
    WindowMats {
        q: qm,
        k: km,
        v: vm,
        tokens,
        dim,
    }
}

/// Row-softmax of `Q K^T / sqrt(dim)`.
fn attention_probs<T: Float>(m: &WindowMats<T>) -> Vec<T> {
    let (n, d) = (m.tokens, m.dim);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut p = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for t in 0..d {
                acc += m.q[i * d + t] * m.k[j * d + t];
            }
            p[i * n + j] = acc * scale;
        }
    }
    let rows = Tensor::new([1, 1, n, n], p).expect("square");
    softmax_lastdim(&rows).into_data()
}

/// Scaled dot-product attention inside each window. `q`, `k`, `v` share
/// dims `(n, c, h, w)`; the output has the same dims.
pub fn window_attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: Option<usize>,
    axis: AttentionAxis,
) -> Result<Tensor<T>> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(Error::shape(
            "window_attention",
            format!("q {:?}, k {:?}, v {:?}", q.dims(), k.dims(), v.dims()),
        ));
    }
    let [n, _, h, w] = q.dims();
    let mut out = Tensor::zeros(q.dims());
    for b in 0..n {
        for win in windows(h, w, window) {
            let m = load_window(q, k, v, b, win, axis);
            let p = attention_probs(&m);
            let (nt, d) = (m.tokens, m.dim);
            let mut o = vec![T::zero(); nt * d];
            for i in 0..nt {
                for t in 0..d {
                    let mut acc = T::zero();
                    for j in 0..nt {
                        acc += p[i * nt + j] * m.v[j * d + t];
                    }
                    o[i * d + t] = acc;
                }
            }
            scatter_window(&mut out, b, win, axis, &o);
        }
    }
    Ok(out)
}

pub fn window_attention_backward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    grad_out: &Tensor<T>,
    window: Option<usize>,
    axis: AttentionAxis,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, _, h, w] = q.dims();
    let mut gq = Tensor::zeros(q.dims());
    let mut gk = Tensor::zeros(q.dims());
    let mut gv = Tensor::zeros(q.dims());
    for b in 0..n {
        for win in windows(h, w, window) {
            let m = load_window(q, k, v, b, win, axis);
            let (go, _, _) = gather_window(grad_out, b, win, axis);
            let p = attention_probs(&m);
            let (nt, d) = (m.tokens, m.dim);
            let scale = T::one() / T::of(d as f64).sqrt();
            // dV = P^T dO
            let mut dv = vec![T::zero(); nt * d];
            for j in 0..nt {
                for t in 0..d {
                    let mut acc = T::zero();
                    for i in 0..nt {
                        acc += p[i * nt + j] * go[i * d + t];
                    }
                    dv[j * d + t] = acc;
                }
            }
            // dP = dO V^T, then through the softmax.
            let mut ds = vec![T::zero(); nt * nt];
            for i in 0..nt {
                let mut dot = T::zero();
                let mut dp = vec![T::zero(); nt];
                for j in 0..nt {
                    let mut acc = T::zero();
                    for t in 0..d {
                        acc += go[i * d + t] * m.v[j * d + t];
                    }
                    dp[j] = acc;
                    dot += acc * p[i * nt + j];
                }
                for j in 0..nt {
                    ds[i * nt + j] = p[i * nt + j] * (dp[j] - dot) * scale;
                }
            }
            let mut dq = vec![T::zero(); nt * d];
            let mut dk = vec![T::zero(); nt * d];
            for i in 0..nt {
                for t in 0..d {
                    let mut aq = T::zero();
                    let mut ak = T::zero();
                    for j in 0..nt {
                        aq += ds[i * nt + j] * m.k[j * d + t];
                        ak += ds[j * nt + i] * m.q[j * d + t];
                    }
                    dq[i * d + t] = aq;
                    dk[i * d + t] = ak;
                }
            }
            scatter_window(&mut gq, b, win, axis, &dq);
            scatter_window(&mut gk, b, win, axis, &dk);
            scatter_window(&mut gv, b, win, axis, &dv);
        }
    }
    (gq, gk, gv)
}

/// Multiply-adds for the two products `Q K^T` and `P V` over all windows.
pub fn window_attention_macs(dims: Dims, window: Option<usize>, axis: AttentionAxis) -> u64 {
    let [n, c, h, w] = dims;
    windows(h, w, window)
        .into_iter()
        .map(|(y0, y1, x0, x1)| {
            let npix = (y1 - y0) * (x1 - x0);
            let (tokens, dim) = match axis {
                AttentionAxis::Spatial => (npix, c),
                AttentionAxis::Channel => (c, npix),
            };
            (2 * tokens * tokens * dim) as u64
        })
        .sum::<u64>()
        * n as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct summation in (ci, ky, kx) order, bias last.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        spec: ConvSpec,
    ) -> Tensor<f64> {
        let [n, c, h, wd] = x.dims();
        let [co, cig, kh, kw] = w.dims();
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let cog = co / spec.groups;
        let _ = c;
        Tensor::from_fn([n, co, oh, ow], |bi, o, oy, ox| {
            let g = o / cog;
            let mut acc = 0.0;
            for cil in 0..cig {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(o, cil, ky, kx)
                                * x.at(bi, g * cig + cil, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc + b.map_or(0.0, |b| b.data()[o])
        })
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut r = rng(1);
        let x = Tensor::<f64>::uniform([2, 3, 5, 4], -1.0, 1.0, &mut r);
        let eye = Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d(&x, &eye, Some(&Tensor::zeros([3, 1, 1, 1])), ConvSpec::same(1)).unwrap();
        assert_eq!(y, x);
        let z = conv2d(&x, &Tensor::zeros([4, 3, 3, 3]), Some(&Tensor::zeros([4, 1, 1, 1])), ConvSpec::same(3))
            .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_tap_counts() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvSpec::same(3)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
        assert_eq!(y.at(0, 0, 1, 2), 6.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
    }

    #[test]
    fn conv_matches_direct_summation_exactly() {
        let mut r = rng(2);
        for &(c, co, k, stride, pad, groups) in &[
            (4, 6, 3, 1, 1, 1),
            (4, 4, 5, 1, 2, 4),
            (8, 4, 3, 2, 1, 2),
            (3, 5, 3, 2, 0, 1),
            (2, 2, 1, 1, 0, 1),
        ] {
            let spec = ConvSpec { stride, padding: pad, groups };
            let x = Tensor::<f64>::uniform([2, c, 7, 8], -1.0, 1.0, &mut r);
            let w = Tensor::uniform([co, c / groups, k, k], -1.0, 1.0, &mut r);
            let b = Tensor::uniform([co, 1, 1, 1], -1.0, 1.0, &mut r);
            let got = conv2d(&x, &w, Some(&b), spec).unwrap();
            assert_eq!(got, conv_oracle(&x, &w, Some(&b), spec), "{spec:?}");
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([2, 2, 3, 3]), None, ConvSpec::same(3)).is_err());
        assert!(conv2d(&x, &Tensor::zeros([2, 3, 5, 5]), None, ConvSpec { stride: 1, padding: 0, groups: 1 }).is_err());
        assert!(conv2d(&x, &Tensor::zeros([3, 1, 3, 3]), None, ConvSpec::depthwise(3, 2)).is_err());
    }

    #[test]
    fn depthwise_constant_interior() {
        let x = Tensor::<f64>::full([1, 2, 5, 5], 0.75);
        let w = Tensor::full([2, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvSpec::depthwise(3, 2)).unwrap();
        assert_eq!(y.at(0, 1, 2, 2), 9.0 * 0.75);
        let eye = Tensor::full([2, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &eye, None, ConvSpec::depthwise(1, 2)).unwrap(), x);
    }

    #[test]
    fn depthwise_matches_per_channel_correlation() {
        let mut r = rng(3);
        let x = Tensor::<f64>::uniform([1, 2, 4, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform([2, 1, 3, 3], -1.0, 1.0, &mut r);
        let got = conv2d(&x, &w, None, ConvSpec::depthwise(3, 2)).unwrap();
        let expect = Tensor::from_fn([1, 2, 4, 4], |_, ch, y, xx| {
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                        acc += w.at(ch, 0, ky, kx) * x.at(0, ch, iy as usize, ix as usize);
                    }
                }
            }
            acc
        });
        assert_eq!(got, expect);
    }

    #[test]
    fn avg_pool_cases() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool(&x, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full([1, 2, 6, 6], 3.25);
        assert!(avg_pool(&c, 2, 2).unwrap().data().iter().all(|&v| v == 3.25));
        assert!(avg_pool(&x, 3, 1).is_err());

        let mut r = rng(4);
        let x = Tensor::<f64>::uniform([2, 3, 8, 8], -1.0, 1.0, &mut r);
        let got = avg_pool(&x, 2, 2).unwrap();
        let expect = Tensor::from_fn([2, 3, 4, 4], |b, ch, y, xx| {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += x.at(b, ch, 2 * y + dy, 2 * xx + dx);
                }
            }
            s / 4.0
        });
        assert_eq!(got, expect);
    }

    #[test]
    fn max_pool_cases() {
        let c = Tensor::<f64>::full([1, 1, 6, 6], -2.0);
        assert!(max_pool(&c, 3, 3, 0).unwrap().0.data().iter().all(|&v| v == -2.0));
        let ramp = Tensor::<f64>::from_fn([1, 1, 6, 6], |_, _, y, x| (y * 6 + x) as f64);
        let (m, _) = max_pool(&ramp, 2, 2, 0).unwrap();
        assert_eq!(m.data(), &[7.0, 9.0, 11.0, 19.0, 21.0, 23.0, 31.0, 33.0, 35.0]);

        let mut r = rng(5);
        let x = Tensor::<f64>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut r);
        let (got, _) = max_pool(&x, 3, 2, 1).unwrap();
        let expect = Tensor::from_fn(got.dims(), |b, ch, oy, ox| {
            let mut best = f64::NEG_INFINITY;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                    if (0..8).contains(&iy) && (0..8).contains(&ix) {
                        best = best.max(x.at(b, ch, iy as usize, ix as usize));
                    }
                }
            }
            best
        });
        assert_eq!(got, expect);
    }

    #[test]
    fn bicubic_identity_and_constant() {
        let mut r = rng(6);
        let x = Tensor::<f64>::uniform([1, 2, 5, 7], -1.0, 1.0, &mut r);
        assert_eq!(bicubic_resize(&x, 5, 7).unwrap(), x);
        let c = Tensor::<f64>::full([1, 1, 9, 6], 0.37);
        for &(oh, ow) in &[(1, 1), (3, 2), (18, 12), (27, 5), (4, 17)] {
            let y = bicubic_resize(&c, oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        }
        assert!(bicubic_resize(&c, 0, 3).is_err());
    }

    #[test]
    fn bicubic_downscale_matches_kernel_sum() {
        // 4x4 ramp to 2x2: scale 2, so the kernel support doubles and the
        // center of output 0 sits at input coordinate 0.5.
        let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |_, _, y, xx| (4 * y + xx) as f64);
        let y = bicubic_resize(&x, 2, 2).unwrap();
        let axis = |o: usize| -> Vec<(usize, f64)> {
            let center = (o as f64 + 0.5) * 2.0 - 0.5;
            let mut taps = Vec::new();
            let mut total = 0.0;
            for j in -6isize..=10 {
                let wgt = keys_cubic((j as f64 - center) / 2.0);
                if wgt != 0.0 {
                    taps.push((j.clamp(0, 3) as usize, wgt));
                    total += wgt;
                }
            }
            taps.into_iter().map(|(i, w)| (i, w / total)).collect()
        };
        for oy in 0..2 {
            for ox in 0..2 {
                let mut v = 0.0;
                for &(iy, wy) in &axis(oy) {
                    for &(ix, wx) in &axis(ox) {
                        v += wy * wx * x.at(0, 0, iy, ix);
                    }
                }
                assert!((y.at(0, 0, oy, ox) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixel_shuffle_definition() {
        let x = Tensor::<f64>::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&x, 3).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut r = rng(7);
        let x = Tensor::<f64>::uniform([2, 6, 3, 3], -3.0, 5.0, &mut r);
        let (y, _) = layer_norm(&x, &Tensor::full([6, 1, 1, 1], 1.0), &Tensor::zeros([6, 1, 1, 1]), 1e-6).unwrap();
        for b in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    let vals: Vec<f64> = (0..6).map(|c| y.at(b, c, yy, xx)).collect();
                    let m = vals.iter().sum::<f64>() / 6.0;
                    let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 6.0;
                    assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5);
                }
            }
        }
        let flat = Tensor::<f64>::from_fn([1, 3, 2, 2], |_, _, y, x| (y + x) as f64);
        let beta = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let (y, _) = layer_norm(&flat, &Tensor::full([3, 1, 1, 1], 4.0), &beta, 1e-6).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == beta.data()[c]));
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut r = rng(8);
        let x = Tensor::<f64>::uniform([1, 5, 4, 4], -2.0, 2.0, &mut r);
        let g = Tensor::<f64>::uniform([5, 1, 1, 1], 0.5, 1.5, &mut r);
        let be = Tensor::<f64>::uniform([5, 1, 1, 1], -0.5, 0.5, &mut r);
        let (y, _) = layer_norm(&x, &g, &be, 1e-5).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let vals: Vec<f64> = (0..5).map(|c| x.at(0, c, yy, xx)).collect();
                let mean = vals.iter().sum::<f64>() / 5.0;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
                for c in 0..5 {
                    let e = g.data()[c] * (vals[c] - mean) / (var + 1e-5).sqrt() + be.data()[c];
                    assert!((y.at(0, c, yy, xx) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(9);
        let x = Tensor::<f64>::uniform([2, 3, 4, 7], -20.0, 20.0, &mut r);
        let y = softmax_lastdim(&x);
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(10);
        let a = Tensor::<f64>::uniform([2, 2, 3, 5], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform([2, 2, 5, 4], -1.0, 1.0, &mut r);
        let got = matmul(&a, &b).unwrap();
        let expect = Tensor::from_fn([2, 2, 3, 4], |n, c, i, j| {
            let mut s = 0.0;
            for t in 0..5 {
                s += a.at(n, c, i, t) * b.at(n, c, t, j);
            }
            s
        });
        assert_eq!(got, expect);
        assert!(matmul(&a, &a).is_err());
        assert_eq!(transpose2d(&transpose2d(&a)), a);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut r = rng(11);
        let x = Tensor::<f64>::uniform([2, 7, 3, 2], -1.0, 1.0, &mut r);
        let parts = split_channels(&x, &[3, 1, 3]).unwrap();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), x);
        assert!(split_channels(&x, &[3, 3]).is_err());
    }

    #[test]
    fn shift_moves_groups_one_pixel() {
        let x = Tensor::<f64>::from_fn([1, 9, 3, 3], |_, c, y, xx| (c * 100 + y * 10 + xx) as f64 + 1.0);
        let y = shift_channels(&x, 1).unwrap();
        assert_eq!(y.plane(0, 0), x.plane(0, 0));
        // Group 0 moves right: column 0 becomes zero fill.
        assert_eq!(y.at(0, 1, 1, 0), 0.0);
        assert_eq!(y.at(0, 1, 1, 1), x.at(0, 1, 1, 0));
        // Last group moves up-left.
        assert_eq!(y.at(0, 8, 0, 0), x.at(0, 8, 1, 1));
        assert_eq!(y.at(0, 8, 2, 2), 0.0);
        assert!(shift_channels(&x, 2).is_err());
    }

    #[test]
    fn window_tiling_covers_grid() {
        let ws = windows(10, 7, Some(4));
        assert_eq!(ws.len(), 3 * 2);
        let area: usize = ws.iter().map(|(a, b, c, d)| (b - a) * (d - c)).sum();
        assert_eq!(area, 70);
        assert_eq!(windows(5, 5, None), vec![(0, 5, 0, 5)]);
    }
}
