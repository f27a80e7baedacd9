//! End-to-end network: shallow head, chained GLCMs with semantic guidance,
//! global residual and a pixel-shuffle reconstruction head.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::config::{ModelConfig, ShiftMode};
use crate::error::{Error, Result};
use crate::glcm;
use crate::imaging::ImageBuffer;
use crate::ops::ConvSpec;
use crate::params::{Init, ParameterStore, Scope};
use crate::prior::PriorMap;
use crate::sgm;
use crate::tensor::{Float, Tensor};

/// Allocates and initializes every parameter of `cfg`.
pub fn build(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut store, &mut rng);
    init.conv("head", 3, cfg.channels, 3, 1)?;
    sgm::init_sgm(&mut init.child("sgm"), cfg)?;
    for i in 1..=cfg.n_glcm {
        glcm::init_glcm(&mut init.child(&format!("glcm{i}")), cfg)?;
    }
    let r = cfg.scale;
    init.conv("recon", cfg.channels, 3 * r * r, 3, 1)?;
    Ok(store)
}

/// Records the forward pass on `lr` (values in `[0, 1]`) into the scope's
/// graph. `prior` is required exactly when the configuration injects one.
pub fn forward_graph<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    lr: Var<'g, T>,
    prior: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    Ok(forward_traced(s, cfg, lr, prior)?.0)
}

/// [`forward_graph`] that also reports how many prior-stream updates ran.
pub fn forward_traced<'g, T: Float>(
    s: &Scope<'_, 'g, T>,
    cfg: &ModelConfig,
    lr: Var<'g, T>,
    prior: Option<Var<'g, T>>,
) -> Result<(Var<'g, T>, usize)> {
    let [_, c, h, w] = lr.dims();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::shape("forward", format!("LR input {:?}", lr.dims())));
    }
    let f0 = s.conv("head", lr, ConvSpec::same(3))?;
    let mut state = None;
    let prior = match (cfg.uses_prior(), prior) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::invalid("forward", "configuration injects a prior but none was given"))
        }
        (true, Some(p)) => {
            if p.dims()[1] != cfg.prior_channels {
                return Err(Error::shape(
                    "forward",
                    format!("prior has {} channels, expected {}", p.dims()[1], cfg.prior_channels),
                ));
            }
            state = Some(sgm::sgm_init(&s.child("sgm"), cfg, f0, p)?);
            Some(p)
        }
    };
    let mut x = f0;
    for i in 1..=cfg.n_glcm {
        if let (true, Some(p), Some(st)) = (cfg.injects_before(i), prior, state) {
            let (out, next) = sgm::sgm_inject(&s.child("sgm"), cfg, i, x, p, st)?;
            x = out;
            state = Some(next);
        }
        x = glcm::glcm_forward(&s.child(&format!("glcm{i}")), cfg, x)?;
    }
    let fused = f0.add(x)?;
    let out = s.conv("recon", fused, ConvSpec::same(3))?.pixel_shuffle(cfg.scale)?;
    Ok((out, state.map_or(0, |st| st.updates)))
}

/// Inference-only forward on plain tensors.
pub fn forward<T: Float>(
    lr: &Tensor<T>,
    prior: Option<&Tensor<T>>,
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let s = Scope::new(&g, params);
    let x = g.constant(lr.clone());
    let p = prior.map(|t| g.constant(t.clone()));
    let out = forward_graph(&s, cfg, x, p)?;
    Ok(out.value().as_ref().clone())
}

/// Upscales an 8-bit image; the output is clamped and rounded to 8 bits.
pub fn super_resolve(
    img: &ImageBuffer,
    prior: Option<&PriorMap>,
    params: &ParameterStore<f32>,
    cfg: &ModelConfig,
) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::invalid("super_resolve", "the network expects RGB input"));
    }
    if let Some(p) = prior {
        p.check_aligned(img.height, img.width)?;
    }
    let lr: Tensor<f32> = img.to_tensor(1.0 / 255.0);
    let out = forward(&lr, prior.map(|p| &p.features), params, cfg)?;
    ImageBuffer::from_tensor(&out, 1.0 / 255.0)
}

// -- statistics -------------------------------------------------------------

/// Reporting bucket of a parameter name, aggregated over repeated blocks
/// (`glcm3.gldeb2.local.dw5.weight` -> `glcm.local`).
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        p if p.starts_with("glcm") => match parts.get(1).copied() {
            Some(g) if g.starts_with("gldeb") => format!("glcm.{}", parts[2]),
            Some("hab") => format!("glcm.{}", parts[2]),
            Some(other) => format!("glcm.{other}"),
            None => "glcm".into(),
        },
        "sgm" => match parts.get(1).copied() {
            Some(p) if p.starts_with("inject") => format!("sgm.{}", parts[2]),
            Some(p) if p.starts_with("fab") => "sgm.fab".into(),
            Some(p) if p.starts_with("fuse") => "sgm.fuse".into(),
            _ => "sgm".into(),
        },
        other => other.to_string(),
    }
}

/// Element count of trainable tensors.
pub fn count_params(params: &ParameterStore<f32>) -> usize {
    params.count_params()
}

pub fn param_breakdown(params: &ParameterStore<f32>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
        *out.entry(module_of(name)).or_insert(0) += p.value.len();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub out_h: usize,
    pub out_w: usize,
    pub total: f64,
    pub breakdown: BTreeMap<String, f64>,
}

/// Analytic multiply-adds of one forward pass producing an
/// `out_h x out_w` image.
///
/// Terms proportional to the pixel count are included: convolutions
/// (`c_out * c_in / groups * k^2` per output pixel) and attention products
/// (`2 * tokens^2 * dim` per window, taking full windows). Work on the
/// 1x1 pooled statistics of the channel gates does not scale with the
/// image and is left out, which keeps the count exactly linear in the
/// number of output pixels for windowed attention.
pub fn count_multiply_adds(cfg: &ModelConfig, out_h: usize, out_w: usize) -> Result<MacReport> {
    cfg.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("count_multiply_adds", "output size must be positive"));
    }
    let r = cfg.scale as f64;
    let px = (out_h * out_w) as f64 / (r * r);
    let mut terms: BTreeMap<String, f64> = BTreeMap::new();
    let mut add = |k: &str, per_px: f64| *terms.entry(k.to_string()).or_insert(0.0) += per_px * px;

    let c = cfg.channels as f64;
    let sq = |v: f64| v * v;
    add("head", 3.0 * c * 9.0);

    if cfg.uses_prior() {
        let fuse = (c + cfg.prior_channels as f64) * c;
        let fab = if cfg.fab_enabled { 2.0 * 9.0 * c * c } else { 0.0 };
        let k = cfg.prior_injection_indices.len() as f64;
        add("sgm.fuse", fuse * (1.0 + k));
        add("sgm.fab", fab);
        add("sgm.fab", fab * k);
        add("sgm.prior_fab", fab * k);
    }

    let n = cfg.n_glcm as f64;
    let blocks = n * cfg.n_gldeb as f64;
    let conv_k = if cfg.shift_mode == ShiftMode::Conv3 { 9.0 } else { 1.0 };
    let cl = cfg.local_channels() as f64;
    if cl > 0.0 {
        let kernels: f64 = if cfg.multipath { 1.0 + 9.0 + 25.0 } else { 1.0 };
        add("glcm.local", blocks * (cl * kernels + 2.0 * sq(cl) * conv_k + 9.0 * sq(cl)));
    }
    let cg = cfg.global_channels() as f64;
    if cg > 0.0 {
        let q = (cfg.global_channels() / 2) as f64;
        let tokens = match cfg.attention_window {
            Some(wsz) => (wsz * wsz) as f64,
            None => px,
        };
        let mut osa = sq(q);
        if cfg.spatial_attention {
            osa += 3.0 * sq(q) + 2.0 * tokens * q;
        }
        if cfg.channel_attention {
            osa += 3.0 * sq(q) + 2.0 * sq(q);
        }
        add("glcm.global", blocks * (sq(cg) + osa));
    }
    add("glcm.merge", blocks * sq(c));
    add("glcm.fusion", n * cfg.n_gldeb as f64 * sq(c));
    let f = cfg.esa_hidden() as f64;
    // conv2 runs on the stride-2 grid, conv3 on the further /3 pooled grid.
    let esa = c * f + 9.0 * sq(f) / 4.0 + 9.0 * sq(f) / 36.0 + sq(f) + f * c;
    add("glcm.esa", n * esa);
    add("recon", c * 3.0 * r * r * 9.0);

    Ok(MacReport {
        out_h,
        out_w,
        total: terms.values().sum(),
        breakdown: terms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub param_count: usize,
    pub param_breakdown: BTreeMap<String, usize>,
    pub multiply_adds: MacReport,
}

pub fn stats(cfg: &ModelConfig, out_h: usize, out_w: usize) -> Result<ModelStats> {
    let params = build(cfg, 0)?;
    Ok(ModelStats {
        param_count: count_params(&params),
        param_breakdown: param_breakdown(&params),
        multiply_adds: count_multiply_adds(cfg, out_h, out_w)?,
    })
}

// -- checkpoints ------------------------------------------------------------

pub fn save_checkpoint(params: &ParameterStore<f32>, cfg: Option<&ModelConfig>, dir: impl AsRef<Path>) -> Result<()> {
    checkpoint::save_bundle(params, dir, cfg)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ParameterStore<f32>> {
    Ok(checkpoint::load_bundle(dir)?.0)
}

/// Loads a checkpoint and checks it holds exactly the tensors `cfg` needs.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ParameterStore<f32>> {
    let store = load_checkpoint(dir)?;
    let template = build(cfg, 0)?;
    for (name, p) in template.iter() {
        let found = store
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?
            .value
            .dims();
        if found != p.value.dims() {
            return Err(Error::DimMismatch {
                name: name.to_string(),
                expected: p.value.dims(),
                found,
            });
        }
    }
    if let Some(extra) = store.names().into_iter().find(|n| !template.contains(n)) {
        return Err(Error::Config(format!("checkpoint tensor {extra} is not part of the configuration")));
    }
    Ok(store)
}
