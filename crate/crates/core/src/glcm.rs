//! Global-local collaborative module: detail-enhancement blocks with a local
//! (high-frequency, multi-scale, shift-conv) branch and a global
//! (self-attention) branch, fused and gated by hybrid channel/spatial
//! attention.

use rand::Rng;

use crate::config::{ModelConfig, ShiftMode};
use crate::error::{Error, Result};
use crate::ops::{AttentionAxis, ConvSpec, Interpolation};
use crate::params::{Init, Scope};
use crate::tensor::Float;
use crate::autograd::Var;

const ONE: ConvSpec = ConvSpec {
    stride: 1,
    padding: 0,
    groups: 1,
};

fn same3() -> ConvSpec {
    ConvSpec::same(3)
}

// -- shift convolution ------------------------------------------------------

/// Shifts all but the first `kept` channels one pixel toward the eight
/// neighbours, then mixes channels with the 1x1 convolution `layer`.
pub fn shift_conv<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    layer: &str,
    x: Var<'g, T>,
    kept: usize,
) -> Result<Var<'g, T>> {
    let shifted = x.shift_channels(kept)?;
    s.conv(layer, shifted, ONE)
}

fn init_sc<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig, layer: &str, c: usize) -> Result<()> {
    let k = if cfg.shift_mode == ShiftMode::Conv3 { 3 } else { 1 };
    init.conv(layer, c, c, k, 1)
}

fn sc<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    layer: &str,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    match cfg.shift_mode {
        ShiftMode::Shift => shift_conv(s, layer, x, cfg.shift_kept(x.dims()[1])),
        ShiftMode::Conv1 => s.conv(layer, x, ONE),
        ShiftMode::Conv3 => s.conv(layer, x, same3()),
    }
}

// -- local branch -----------------------------------------------------------

fn depthwise_kernels(cfg: &ModelConfig) -> &'static [usize] {
    if cfg.multipath {
        &[1, 3, 5]
    } else {
        &[1]
    }
}

pub fn init_local<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig, c: usize) -> Result<()> {
    for &k in depthwise_kernels(cfg) {
        init.conv(&format!("dw{k}"), c, c, k, c)?;
    }
    init_sc(init, cfg, "sc_a", c)?;
    init_sc(init, cfg, "sc_b", c)?;
    init.conv("out", c, c, 3, 1)
}

/// High-frequency residual `x - up(avg_pool(x))`. Inputs smaller than the
/// pooling window shrink the window to fit; a 1-pixel side leaves no
/// high-frequency content.
pub fn high_frequency<'g, T: Float>(x: Var<'g, T>, window: usize) -> Result<Var<'g, T>> {
    let [_, _, h, w] = x.dims();
    let k = window.min(h).min(w).max(1);
    let up = x.avg_pool(k, k)?.resize(h, w, Interpolation::Bicubic)?;
    x.sub(up)
}

/// `Conv3x3(SC_a(x) * sigmoid(SC_b(sum_k dw_k(high)) + x))`.
pub fn local_branch<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let c = x.dims()[1];
    let high = high_frequency(x, cfg.pool_window)?;
    let mut multi: Option<Var<'g, T>> = None;
    for &k in depthwise_kernels(cfg) {
        let y = s.conv(&format!("dw{k}"), high, ConvSpec::depthwise(k, c))?;
        multi = Some(match multi {
            Some(acc) => acc.add(y)?,
            None => y,
        });
    }
    let multi = multi.expect("at least one kernel");
    let a = sc(s, cfg, "sc_a", x)?;
    let gate = sc(s, cfg, "sc_b", multi)?.add(x)?.sigmoid()?;
    s.conv("out", a.mul(gate)?, same3())
}

// -- global branch ------------------------------------------------------------

pub fn init_osa<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig, c: usize) -> Result<()> {
    if cfg.spatial_attention {
        init.conv("qkv_spatial", c, 3 * c, 1, 1)?;
    }
    if cfg.channel_attention {
        init.conv("qkv_channel", c, 3 * c, 1, 1)?;
    }
    init.conv("proj", c, c, 1, 1)
}

fn attention_stage<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    layer: &str,
    x: Var<'g, T>,
    window: Option<usize>,
    axis: AttentionAxis,
) -> Result<Var<'g, T>> {
    let c = x.dims()[1];
    let qkv = s.conv(layer, x, ONE)?.split(&[c, c, c])?;
    Var::window_attention(qkv[0], qkv[1], qkv[2], window, axis)
}

/// Spatial attention (pixels as tokens), then channel attention (channels
/// as tokens) inside the same windows, an output projection and a residual.
pub fn osa<'g, T: Float>(s: &Scope<'_, 'g, T>, cfg: &ModelConfig, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let mut y = x;
    for axis in cfg.attention_axes() {
        let layer = match axis {
            AttentionAxis::Spatial => "qkv_spatial",
            AttentionAxis::Channel => "qkv_channel",
        };
        y = attention_stage(s, layer, y, cfg.attention_window, axis)?;
    }
    s.conv("proj", y, ONE)?.add(x)
}

pub fn init_global<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig, c: usize) -> Result<()> {
    init.conv("entry", c, c, 1, 1)?;
    init_osa(&mut init.child("osa"), cfg, c / 2)
}

/// `Concat[OSA(g1), g2]` where `g1, g2 = Split(Conv1x1(x))`.
pub fn global_branch<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let c = x.dims()[1];
    let halves = s.conv("entry", x, ONE)?.split(&[c / 2, c - c / 2])?;
    let attended = osa(&s.child("osa"), cfg, halves[0])?;
    Var::concat(&[attended, halves[1]])
}

// -- GLDEB ------------------------------------------------------------------

pub fn init_gldeb<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    if cfg.local_branch {
        init_local(&mut init.child("local"), cfg, cfg.local_channels())?;
    }
    if cfg.global_branch {
        init_global(&mut init.child("global"), cfg, cfg.global_channels())?;
    }
    init.conv("merge", cfg.channels, cfg.channels, 1, 1)
}

/// Channel halves through the local and global branches, concatenated and
/// mixed by a 1x1 convolution. A disabled branch hands all channels to the
/// other one.
pub fn gldeb<'g, T: Float>(s: &Scope<'_, 'g, T>, cfg: &ModelConfig, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let (cl, cg) = (cfg.local_channels(), cfg.global_channels());
    let mut parts = Vec::with_capacity(2);
    if cl > 0 {
        let xl = if cg > 0 { x.slice_channels(0, cl)? } else { x };
        parts.push(local_branch(&s.child("local"), cfg, xl)?);
    }
    if cg > 0 {
        let xg = if cl > 0 { x.slice_channels(cl, cg)? } else { x };
        parts.push(global_branch(&s.child("global"), cfg, xg)?);
    }
    let joined = if parts.len() == 1 { parts[0] } else { Var::concat(&parts)? };
    s.conv("merge", joined, ONE)
}

// -- hybrid attention ---------------------------------------------------------

pub fn init_cca<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    let (c, r) = (cfg.channels, cfg.cca_hidden());
    init.conv("reduce", c, r, 1, 1)?;
    init.conv("expand", r, c, 1, 1)
}

/// Per-channel mean plus (population) standard deviation.
pub fn contrast<'g, T: Float>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let mean = x.spatial_mean()?;
    let std = x.sub(mean)?.square()?.spatial_mean()?.sqrt()?;
    mean.add(std)
}

/// Contrast-aware channel attention.
pub fn cca<'g, T: Float>(s: &Scope<'_, 'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let stat = contrast(x)?;
    let gate = s
        .conv("expand", s.conv("reduce", stat, ONE)?.relu()?, ONE)?
        .sigmoid()?;
    x.mul(gate)
}

pub fn init_esa<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    let (c, f) = (cfg.channels, cfg.esa_hidden());
    init.conv("conv1", c, f, 1, 1)?;
    init.conv("conv2", f, f, 3, 1)?;
    init.conv("conv3", f, f, 3, 1)?;
    init.conv("conv_f", f, f, 1, 1)?;
    init.conv("conv4", f, c, 1, 1)
}

pub const ESA_STRIDE_CONV: ConvSpec = ConvSpec {
    stride: 2,
    padding: 1,
    groups: 1,
};
pub const ESA_POOL: (usize, usize, usize) = (7, 3, 3);

/// Enhanced spatial attention: a low-resolution mask upsampled back to the
/// input grid.
pub fn esa<'g, T: Float>(s: &Scope<'_, 'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let [_, _, h, w] = x.dims();
    let c1 = s.conv("conv1", x, ONE)?;
    let c2 = s.conv("conv2", c1, ESA_STRIDE_CONV)?;
    let (k, stride, pad) = ESA_POOL;
    let pooled = c2.max_pool(k, stride, pad)?;
    let c3 = s
        .conv("conv3", pooled, same3())?
        .resize(h, w, Interpolation::Bilinear)?;
    let skip = s.conv("conv_f", c1, ONE)?;
    let mask = s.conv("conv4", c3.add(skip)?, ONE)?.sigmoid()?;
    x.mul(mask)
}

pub fn init_hab<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    init_cca(&mut init.child("cca"), cfg)?;
    init_esa(&mut init.child("esa"), cfg)
}

// -- GLCM -------------------------------------------------------------------

pub fn init_glcm<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    init.tensor("ln.gamma", crate::Tensor::full([c, 1, 1, 1], T::one()))?;
    init.tensor("ln.beta", crate::Tensor::zeros([c, 1, 1, 1]))?;
    for j in 1..=cfg.n_gldeb {
        init_gldeb(&mut init.child(&format!("gldeb{j}")), cfg)?;
    }
    init.conv("fusion", cfg.n_gldeb * c, c, 1, 1)?;
    init_hab(&mut init.child("hab"), cfg)
}

/// `x + sigmoid(CCA(F) + ESA(F)) * F` where `F` fuses the outputs of the
/// chained detail-enhancement blocks applied to `LN(x)`.
pub fn glcm_forward<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    if x.dims()[1] != cfg.channels {
        return Err(Error::shape(
            "glcm",
            format!("{} channels, expected {}", x.dims()[1], cfg.channels),
        ));
    }
    let mut y = x.layer_norm(s.param("ln.gamma")?, s.param("ln.beta")?, cfg.ln_eps)?;
    let mut outs = Vec::with_capacity(cfg.n_gldeb);
    for j in 1..=cfg.n_gldeb {
        y = gldeb(&s.child(&format!("gldeb{j}")), cfg, y)?;
        outs.push(y);
    }
    let fused = s.conv("fusion", Var::concat(&outs)?, ONE)?;
    let hab = s.child("hab");
    let attn = cca(&hab.child("cca"), fused)?.add(esa(&hab.child("esa"), fused)?)?;
    x.add(attn.sigmoid()?.mul(fused)?)
}
