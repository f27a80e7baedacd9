//! PSNR and SSIM on the luma channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{rgb_to_y, ImageBuffer};
use crate::tensor::Tensor;

/// PSNR reported for identical inputs (and the upper clamp otherwise).
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub crop_border: usize,
}

fn check_pair(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>, crop: usize) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.h() <= 2 * crop || a.w() <= 2 * crop {
        return Err(Error::invalid(
            op,
            format!("crop {crop} leaves nothing of {}x{}", a.w(), a.h()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on the 0..255 scale over all channels, after
/// discarding `crop` pixels at every border.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, crop: usize) -> Result<f64> {
    check_pair("psnr", a, b, crop)?;
    let [n, c, h, w] = a.dims();
    let mut sse = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for ch in 0..c {
            for y in crop..h - crop {
                for x in crop..w - crop {
                    let d = a.at(i, ch, y, x) - b.at(i, ch, y, x);
                    sse += d * d;
                    count += 1;
                }
            }
        }
    }
    let mse = sse / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let s = k.len();
    let (oh, ow) = (h + 1 - s, w + 1 - s);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..s).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..s).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every fully contained 11x11 Gaussian
/// window, averaged over channels, after discarding `crop` border pixels.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, crop: usize) -> Result<f64> {
    check_pair("ssim", a, b, crop)?;
    let [n, c, h, w] = a.dims();
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    if ch < SSIM_WINDOW || cw < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{cw}x{ch} after cropping is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for i in 0..n {
        for chn in 0..c {
            let cropped = |t: &Tensor<f64>| -> Vec<f64> {
                let mut v = Vec::with_capacity(ch * cw);
                for y in crop..h - crop {
                    for x in crop..w - crop {
                        v.push(t.at(i, chn, y, x));
                    }
                }
                v
            };
            let (pa, pb) = (cropped(a), cropped(b));
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
            let mu_a = filter_valid(&pa, ch, cw, &k);
            let mu_b = filter_valid(&pb, ch, cw, &k);
            let aa = filter_valid(&prod(&pa, &pa), ch, cw, &k);
            let bb = filter_valid(&prod(&pb, &pb), ch, cw, &k);
            let ab = filter_valid(&prod(&pa, &pb), ch, cw, &k);
            let mut sum = 0.0;
            for j in 0..mu_a.len() {
                let (ma, mb) = (mu_a[j], mu_b[j]);
                let va = aa[j] - ma * ma;
                let vb = bb[j] - mb * mb;
                let cov = ab[j] - ma * mb;
                sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
            total += sum / mu_a.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}

/// Y-channel PSNR/SSIM of `test` against `reference`, cropping `scale`
/// pixels from each border.
pub fn evaluate(reference: &ImageBuffer, test: &ImageBuffer, scale: usize) -> Result<MetricReport> {
    if (reference.width, reference.height) != (test.width, test.height) {
        return Err(Error::shape(
            "evaluate",
            format!(
                "{}x{} vs {}x{}",
                reference.width, reference.height, test.width, test.height
            ),
        ));
    }
    let (ya, yb) = (rgb_to_y(reference), rgb_to_y(test));
    Ok(MetricReport {
        psnr: psnr(&ya, &yb, scale)?,
        ssim: ssim(&ya, &yb, scale)?,
        crop_border: scale,
    })
}
