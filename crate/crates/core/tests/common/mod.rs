//! Reference implementation of the network written directly against the
//! tensor kernels, without the autograd tape or the block code. Every
//! equation is spelled out on plain tensors so the library forward pass can
//! be compared against it.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgglc_core::config::{ModelConfig, ShiftMode};
use sgglc_core::metrics;
use sgglc_core::ops::{self, ConvSpec};
use sgglc_core::{ParameterStore, Tensor};

pub type T64 = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(dims: [usize; 4], seed: u64) -> T64 {
    Tensor::uniform(dims, -1.0, 1.0, &mut rng(seed))
}

/// Replaces every tensor of the store with fresh uniform values so that
/// biases and norm affines are exercised too.
pub fn randomize(store: &mut ParameterStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

pub fn zero_all(store: &mut ParameterStore<f64>, prefix: &str) {
    for (name, p) in store.iter_mut() {
        if name.starts_with(prefix) {
            p.value = p.value.map(|_| 0.0);
        }
    }
}

fn zip(a: &T64, b: &T64, f: impl Fn(f64, f64) -> f64) -> T64 {
    a.zip_map(b, f).unwrap()
}

pub fn add(a: &T64, b: &T64) -> T64 {
    zip(a, b, |x, y| x + y)
}

pub fn sub(a: &T64, b: &T64) -> T64 {
    zip(a, b, |x, y| x - y)
}

pub fn mul(a: &T64, b: &T64) -> T64 {
    zip(a, b, |x, y| x * y)
}

pub fn sigmoid(a: &T64) -> T64 {
    a.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn relu(a: &T64) -> T64 {
    a.map(|v| v.max(0.0))
}

/// `x[n, c, y, x] * g[n, c]`.
pub fn scale_channels(x: &T64, g: &T64) -> T64 {
    Tensor::from_fn(x.dims(), |n, c, y, xx| x.at(n, c, y, xx) * g.at(n, c, 0, 0))
}

pub fn channel_means(x: &T64) -> T64 {
    let [n, c, h, w] = x.dims();
    Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
        let mut s = 0.0;
        for y in 0..h {
            for xx in 0..w {
                s += x.at(b, ch, y, xx);
            }
        }
        s / (h * w) as f64
    })
}

pub fn concat(parts: &[&T64]) -> T64 {
    ops::concat_channels(parts).unwrap()
}

pub fn slice(x: &T64, start: usize, len: usize) -> T64 {
    ops::slice_channels(x, start, len).unwrap()
}

pub struct Oracle<'a> {
    pub store: &'a ParameterStore<f64>,
    pub cfg: &'a ModelConfig,
}

impl<'a> Oracle<'a> {
    pub fn new(store: &'a ParameterStore<f64>, cfg: &'a ModelConfig) -> Self {
        Oracle { store, cfg }
    }

    pub fn t(&self, name: &str) -> &T64 {
        self.store
            .value(name)
            .unwrap_or_else(|_| panic!("oracle needs {name}"))
    }

    pub fn conv(&self, layer: &str, x: &T64, spec: ConvSpec) -> T64 {
        let w = self.t(&format!("{layer}.weight"));
        let b = self.t(&format!("{layer}.bias"));
        ops::conv2d(x, w, Some(b), spec).unwrap()
    }

    pub fn conv1(&self, layer: &str, x: &T64) -> T64 {
        self.conv(layer, x, ConvSpec::same(1))
    }

    pub fn conv3(&self, layer: &str, x: &T64) -> T64 {
        self.conv(layer, x, ConvSpec::same(3))
    }

    /// Channel-wise layer norm with a two-pass mean/variance per pixel.
    pub fn layer_norm(&self, p: &str, x: &T64) -> T64 {
        let [n, c, h, w] = x.dims();
        let (g, b) = (self.t(&format!("{p}.gamma")), self.t(&format!("{p}.beta")));
        let mut out = Tensor::zeros(x.dims());
        for bi in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let vals: Vec<f64> = (0..c).map(|ch| x.at(bi, ch, y, xx)).collect();
                    let mean = vals.iter().sum::<f64>() / c as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    for ch in 0..c {
                        let xhat = (vals[ch] - mean) / (var + self.cfg.ln_eps).sqrt();
                        out.set(bi, ch, y, xx, g.data()[ch] * xhat + b.data()[ch]);
                    }
                }
            }
        }
        out
    }

    pub fn sc(&self, layer: &str, x: &T64) -> T64 {
        match self.cfg.shift_mode {
            ShiftMode::Shift => {
                let kept = self.cfg.shift_kept(x.c());
                self.conv1(layer, &ops::shift_channels(x, kept).unwrap())
            }
            ShiftMode::Conv1 => self.conv1(layer, x),
            ShiftMode::Conv3 => self.conv3(layer, x),
        }
    }

    pub fn local(&self, p: &str, x: &T64) -> T64 {
        let [_, c, h, w] = x.dims();
        let k = self.cfg.pool_window.min(h).min(w);
        let down = ops::avg_pool(x, k, k).unwrap();
        let up = ops::bicubic_resize(&down, h, w).unwrap();
        let high = sub(x, &up);
        let kernels: &[usize] = if self.cfg.multipath { &[1, 3, 5] } else { &[1] };
        let mut multi = Tensor::zeros(x.dims());
        for &ks in kernels {
            let y = self.conv(&format!("{p}.dw{ks}"), &high, ConvSpec::depthwise(ks, c));
            multi = add(&multi, &y);
        }
        let a = self.sc(&format!("{p}.sc_a"), x);
        let gate = sigmoid(&add(&self.sc(&format!("{p}.sc_b"), &multi), x));
        self.conv3(&format!("{p}.out"), &mul(&a, &gate))
    }

    pub fn osa(&self, p: &str, x: &T64) -> T64 {
        let c = x.c();
        let mut y = x.clone();
        let win = self.cfg.attention_window;
        if self.cfg.spatial_attention {
            let qkv = self.conv1(&format!("{p}.qkv_spatial"), &y);
            y = naive_attention(&slice(&qkv, 0, c), &slice(&qkv, c, c), &slice(&qkv, 2 * c, c), win, false);
        }
        if self.cfg.channel_attention {
            let qkv = self.conv1(&format!("{p}.qkv_channel"), &y);
            y = naive_attention(&slice(&qkv, 0, c), &slice(&qkv, c, c), &slice(&qkv, 2 * c, c), win, true);
        }
        add(&self.conv1(&format!("{p}.proj"), &y), x)
    }

    pub fn global(&self, p: &str, x: &T64) -> T64 {
        let c = x.c();
        let e = self.conv1(&format!("{p}.entry"), x);
        let g1 = slice(&e, 0, c / 2);
        let g2 = slice(&e, c / 2, c - c / 2);
        concat(&[&self.osa(&format!("{p}.osa"), &g1), &g2])
    }

    pub fn gldeb(&self, p: &str, x: &T64) -> T64 {
        let (cl, cg) = (self.cfg.local_channels(), self.cfg.global_channels());
        let joined = match (cl > 0, cg > 0) {
            (true, true) => concat(&[
                &self.local(&format!("{p}.local"), &slice(x, 0, cl)),
                &self.global(&format!("{p}.global"), &slice(x, cl, cg)),
            ]),
            (true, false) => self.local(&format!("{p}.local"), x),
            _ => self.global(&format!("{p}.global"), x),
        };
        self.conv1(&format!("{p}.merge"), &joined)
    }

    pub fn cca(&self, p: &str, x: &T64) -> T64 {
        let [n, c, h, w] = x.dims();
        let mean = channel_means(x);
        let stat = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
            let m = mean.at(b, ch, 0, 0);
            let mut var = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    var += (x.at(b, ch, y, xx) - m).powi(2);
                }
            }
            m + (var / (h * w) as f64).sqrt()
        });
        let hidden = relu(&self.conv1(&format!("{p}.reduce"), &stat));
        let gate = sigmoid(&self.conv1(&format!("{p}.expand"), &hidden));
        scale_channels(x, &gate)
    }

    pub fn esa(&self, p: &str, x: &T64) -> T64 {
        let [_, _, h, w] = x.dims();
        let c1 = self.conv1(&format!("{p}.conv1"), x);
        let stride2 = ConvSpec {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        let c2 = self.conv(&format!("{p}.conv2"), &c1, stride2);
        let (pooled, _) = ops::max_pool(&c2, 7, 3, 3).unwrap();
        let c3 = self.conv3(&format!("{p}.conv3"), &pooled);
        let up = ops::bilinear_resize(&c3, h, w).unwrap();
        let cf = self.conv1(&format!("{p}.conv_f"), &c1);
        let mask = sigmoid(&self.conv1(&format!("{p}.conv4"), &add(&up, &cf)));
        mul(x, &mask)
    }

    pub fn glcm(&self, p: &str, x: &T64) -> T64 {
        let mut y = self.layer_norm(&format!("{p}.ln"), x);
        let mut outs = Vec::new();
        for j in 1..=self.cfg.n_gldeb {
            y = self.gldeb(&format!("{p}.gldeb{j}"), &y);
            outs.push(y.clone());
        }
        let refs: Vec<&T64> = outs.iter().collect();
        let fused = self.conv1(&format!("{p}.fusion"), &concat(&refs));
        let attn = add(
            &self.cca(&format!("{p}.hab.cca"), &fused),
            &self.esa(&format!("{p}.hab.esa"), &fused),
        );
        add(x, &mul(&sigmoid(&attn), &fused))
    }

    pub fn fab(&self, p: &str, x: &T64) -> T64 {
        if !self.cfg.fab_enabled {
            return x.clone();
        }
        let body = self.conv3(&format!("{p}.conv2"), &relu(&self.conv3(&format!("{p}.conv1"), x)));
        let squeeze = relu(&self.conv1(&format!("{p}.se_reduce"), &channel_means(&body)));
        let gate = sigmoid(&self.conv1(&format!("{p}.se_expand"), &squeeze));
        add(&scale_channels(&body, &gate), x)
    }

    /// Returns `(F_v0, P_1)`.
    pub fn sgm_init(&self, f0: &T64, prior: &T64) -> (T64, T64) {
        let fv0 = self.conv1("sgm.fuse0", &concat(&[f0, prior]));
        let p1 = self.fab("sgm.fab0", &fv0);
        (fv0, p1)
    }

    /// Returns `(output, next prior stream)`.
    pub fn sgm_inject(&self, site: usize, f: &T64, prior: &T64, stream: &T64) -> (T64, T64) {
        let p = format!("sgm.inject{site}");
        let fv = self.conv1(&format!("{p}.fuse"), &concat(&[f, prior]));
        let refined = self.fab(&format!("{p}.fab"), &fv);
        let out = add(&refined, &mul(&refined, stream));
        let next = add(stream, &self.fab(&format!("{p}.prior_fab"), stream));
        (out, next)
    }

    pub fn forward(&self, lr: &T64, prior: Option<&T64>) -> T64 {
        let f0 = self.conv3("head", lr);
        let mut stream = prior.map(|t| self.sgm_init(&f0, t).1);
        let mut x = f0.clone();
        for i in 1..=self.cfg.n_glcm {
            if self.cfg.injects_before(i) {
                let (out, next) = self.sgm_inject(i, &x, prior.unwrap(), stream.as_ref().unwrap());
                x = out;
                stream = Some(next);
            }
            x = self.glcm(&format!("glcm{i}"), &x);
        }
        let fused = add(&f0, &x);
        ops::pixel_shuffle(&self.conv3("recon", &fused), self.cfg.scale).unwrap()
    }
}

/// Windowed scaled dot-product attention with explicit loops. With
/// `channels_as_tokens`, each window's channels attend to each other using
/// the window's pixels as features.
pub fn naive_attention(q: &T64, k: &T64, v: &T64, window: Option<usize>, channels_as_tokens: bool) -> T64 {
    let [n, c, h, w] = q.dims();
    let mut out = Tensor::zeros(q.dims());
    let ws = window.unwrap_or(h.max(w));
    for b in 0..n {
        for y0 in (0..h).step_by(ws) {
            for x0 in (0..w).step_by(ws) {
                let pix: Vec<(usize, usize)> = (y0..(y0 + ws).min(h))
                    .flat_map(|y| (x0..(x0 + ws).min(w)).map(move |x| (y, x)))
                    .collect();
                // token i, feature f -> value
                let tok = |t: &T64, i: usize, f: usize| {
                    if channels_as_tokens {
                        t.at(b, i, pix[f].0, pix[f].1)
                    } else {
                        t.at(b, f, pix[i].0, pix[i].1)
                    }
                };
                let (ntok, dim) = if channels_as_tokens { (c, pix.len()) } else { (pix.len(), c) };
                let scale = 1.0 / (dim as f64).sqrt();
                for i in 0..ntok {
                    let logits: Vec<f64> = (0..ntok)
                        .map(|j| (0..dim).map(|f| tok(q, i, f) * tok(k, j, f)).sum::<f64>() * scale)
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for f in 0..dim {
                        let val: f64 = (0..ntok).map(|j| e[j] / z * tok(v, j, f)).sum();
                        if channels_as_tokens {
                            out.set(b, i, pix[f].0, pix[f].1, val);
                        } else {
                            out.set(b, f, pix[i].0, pix[i].1, val);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn assert_close(a: &T64, b: &T64, tol: f64, what: &str) {
    assert_eq!(a.dims(), b.dims(), "{what}: dims");
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "{what}: max abs diff {d:e} > {tol:e}");
}

/// The 3x3 kernel whose only non-zero tap for input channel `i` sits at the
/// offset that reproduces that channel's shift.
pub fn sparse_kernel(w1: &T64, kept: usize) -> T64 {
    let [co, ci, _, _] = w1.dims();
    let group = ((ci - kept) / 8).max(1);
    Tensor::from_fn([co, ci, 3, 3], |o, i, ky, kx| {
        let (dy, dx) = ops::shift_of(i, kept, group);
        if ky as isize == 1 - dy && kx as isize == 1 - dx {
            w1.at(o, i, 0, 0)
        } else {
            0.0
        }
    })
}

pub fn naive_psnr(a: &T64, b: &T64) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (255.0f64.powi(2) / mse).log10()
}

/// Weighted statistics of every 11x11 window computed directly from the 2-D
/// Gaussian, one window at a time.
pub fn naive_ssim(a: &T64, b: &T64) -> f64 {
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let s = metrics::SSIM_WINDOW;
    let mid = (s - 1) as f64 / 2.0;
    let mut weights = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let d2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
            weights[i * s + j] = (-d2 / (2.0 * metrics::SSIM_SIGMA * metrics::SSIM_SIGMA)).exp();
        }
    }
    let z: f64 = weights.iter().sum();
    let [_, _, h, w] = a.dims();
    let mut total = 0.0;
    let mut count = 0.0;
    for y0 in 0..=h - s {
        for x0 in 0..=w - s {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..s {
                for j in 0..s {
                    let k = weights[i * s + j] / z;
                    ma += k * a.at(0, 0, y0 + i, x0 + j);
                    mb += k * b.at(0, 0, y0 + i, x0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..s {
                for j in 0..s {
                    let k = weights[i * s + j] / z;
                    let (da, db) = (a.at(0, 0, y0 + i, x0 + j) - ma, b.at(0, 0, y0 + i, x0 + j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}
