//! Semantic prior maps: loaded from SGT1 files or extracted with a frozen
//! VGG-style convolution stack truncated after its `conv4_2` layer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::ops::{self, ConvSpec};
use crate::params::{Init, ParameterStore};
use crate::sgt;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorSource {
    File,
    Extractor,
}

/// Prior features aligned with an LR input, `(n, c_p, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    pub features: Tensor<f32>,
    pub source: PriorSource,
}

impl PriorMap {
    pub fn channels(&self) -> usize {
        self.features.c()
    }

    /// Fails unless the map covers an `h x w` grid.
    pub fn check_aligned(&self, h: usize, w: usize) -> Result<()> {
        let [_, _, ph, pw] = self.features.dims();
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "prior",
                format!("prior grid {ph}x{pw} does not match LR input {h}x{w}"),
            ));
        }
        Ok(())
    }
}

/// Reads a prior tensor and, when it was stored on a coarser grid,
/// upsamples it bilinearly to `expected_hw`.
pub fn load_prior(path: impl AsRef<Path>, expected_hw: (usize, usize), channels: usize) -> Result<PriorMap> {
    let t: Tensor<f32> = sgt::read(path)?;
    let [_, c, h, w] = t.dims();
    if c != channels {
        return Err(Error::Config(format!(
            "prior has {c} channels, configuration expects {channels}"
        )));
    }
    let (eh, ew) = expected_hw;
    let features = if (h, w) == (eh, ew) {
        t
    } else if h <= eh && w <= ew {
        ops::bilinear_resize(&t, eh, ew)?
    } else {
        return Err(Error::shape(
            "load_prior",
            format!("prior grid {h}x{w} is finer than the LR input {eh}x{ew}"),
        ));
    };
    Ok(PriorMap {
        features,
        source: PriorSource::File,
    })
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Layer names of the truncated stack in order; `None` marks a 2x2 max pool.
pub const VGG_LAYERS: [Option<&str>; 12] = [
    Some("conv1_1"),
    Some("conv1_2"),
    None,
    Some("conv2_1"),
    Some("conv2_2"),
    None,
    Some("conv3_1"),
    Some("conv3_2"),
    Some("conv3_3"),
    Some("conv3_4"),
    None,
    Some("conv4_1"),
];
pub const VGG_OUTPUT: &str = "conv4_2";
pub const VGG19_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Frozen feature extractor. Every 3x3 convolution is followed by ReLU
/// except the last (`conv4_2`), whose raw response is the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct VggSlice {
    params: ParameterStore<f32>,
    widths: [usize; 4],
}

fn stage_of(layer: &str) -> usize {
    layer.as_bytes()[4] as usize - b'1' as usize
}

fn layer_io(layer: &str, widths: [usize; 4]) -> (usize, usize) {
    let stage = stage_of(layer);
    let first = layer.ends_with("_1");
    let cin = match (stage, first) {
        (0, true) => 3,
        (s, true) => widths[s - 1],
        (s, false) => widths[s],
    };
    (cin, widths[stage])
}

fn all_convs() -> impl Iterator<Item = &'static str> {
    VGG_LAYERS.iter().flatten().copied().chain(std::iter::once(VGG_OUTPUT))
}

impl VggSlice {
    /// Fixed-seed random weights with the given stage widths.
    pub fn random(widths: [usize; 4], seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng).frozen();
        for layer in all_convs() {
            let (cin, cout) = layer_io(layer, widths);
            init.conv(layer, cin, cout, 3, 1)?;
        }
        Ok(VggSlice { params: store, widths })
    }

    /// Builds the slice from a store holding `<layer>.weight` and
    /// `<layer>.bias` for every layer; widths are read from the weights.
    pub fn from_store(mut params: ParameterStore<f32>) -> Result<Self> {
        let width = |layer: &str| -> Result<usize> { Ok(params.value(&format!("{layer}.weight"))?.n()) };
        let widths = [width("conv1_1")?, width("conv2_1")?, width("conv3_1")?, width("conv4_1")?];
        for layer in all_convs() {
            let (cin, cout) = layer_io(layer, widths);
            for (suffix, dims) in [("weight", [cout, cin, 3, 3]), ("bias", [cout, 1, 1, 1])] {
                let name = format!("{layer}.{suffix}");
                let found = params.value(&name)?.dims();
                if found != dims {
                    return Err(Error::DimMismatch {
                        name,
                        expected: dims,
                        found,
                    });
                }
            }
        }
        params.freeze();
        Ok(VggSlice { params, widths })
    }

    /// Loads a weight bundle directory (manifest plus SGT1 tensors).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (store, _) = checkpoint::load_bundle(dir)?;
        Self::from_store(store)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_bundle(&self.params, dir, None)
    }

    pub fn params(&self) -> &ParameterStore<f32> {
        &self.params
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn output_channels(&self) -> usize {
        self.widths[3]
    }

    /// Raw `conv4_2` response for images in `[0, 1]`, on the 1/8 grid.
    pub fn features<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims();
        if c != 3 && c != 1 {
            return Err(Error::shape("vgg", format!("{c}-channel input")));
        }
        if h < 8 || w < 8 {
            return Err(Error::shape("vgg", format!("{h}x{w} input is below the 8x8 minimum")));
        }
        let mut y = Tensor::from_fn([n, 3, h, w], |b, ch, yy, xx| {
            let v = x.at(b, if c == 1 { 0 } else { ch }, yy, xx).as_f64();
            T::of((v - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch])
        });
        let conv = |y: &Tensor<T>, layer: &str| -> Result<Tensor<T>> {
            let wt = self.params.value(&format!("{layer}.weight"))?.cast::<T>();
            let bs = self.params.value(&format!("{layer}.bias"))?.cast::<T>();
            ops::conv2d(y, &wt, Some(&bs), ConvSpec::same(3))
        };
        for step in VGG_LAYERS {
            y = match step {
                Some(layer) => conv(&y, layer)?.map(|v| v.max(T::zero())),
                None => ops::max_pool(&y, 2, 2, 0)?.0,
            };
        }
        conv(&y, VGG_OUTPUT)
    }

    /// Features bilinearly upsampled back to the input grid.
    pub fn aligned_features<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(x)?;
        ops::bilinear_resize(&f, x.h(), x.w())
    }
}

/// Marks every extractor parameter non-trainable.
pub fn freeze(mut vgg: VggSlice) -> VggSlice {
    vgg.params.freeze();
    vgg
}

pub fn extract_prior(img_lr: &ImageBuffer, vgg: &VggSlice) -> Result<PriorMap> {
    let x: Tensor<f32> = img_lr.to_tensor(1.0 / 255.0);
    Ok(PriorMap {
        features: vgg.aligned_features(&x)?,
        source: PriorSource::Extractor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: [usize; 4] = [4, 4, 8, 8];

    #[test]
    fn layer_shapes() {
        assert_eq!(layer_io("conv1_1", VGG19_WIDTHS), (3, 64));
        assert_eq!(layer_io("conv3_1", VGG19_WIDTHS), (128, 256));
        assert_eq!(layer_io("conv4_2", VGG19_WIDTHS), (512, 512));
        let v = VggSlice::random(SMALL, 0).unwrap();
        assert_eq!(v.params().len(), 2 * 10);
        assert_eq!(v.params().count_params(), 0);
    }

    #[test]
    fn zero_weights_give_bias_features() {
        let mut v = VggSlice::random(SMALL, 0).unwrap();
        for (name, p) in v.params.iter_mut() {
            let fill = if name.starts_with("conv4_2.bias") { 0.5 } else { 0.0 };
            p.value = p.value.map(|_| fill);
        }
        let img = ImageBuffer::from_fn(16, 12, 3, |x, y, _| ((x * 13 + y * 7) % 256) as u8);
        let prior = extract_prior(&img, &v).unwrap();
        assert_eq!(prior.features.dims(), [1, 8, 12, 16]);
        assert!(prior.features.data().iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }

    #[test]
    fn constant_input_gives_spatially_constant_interior() {
        let v = VggSlice::random(SMALL, 3).unwrap();
        let img = ImageBuffer::from_fn(128, 128, 3, |_, _, c| [200, 100, 50][c]);
        let f = v.features(&img.to_tensor::<f64>(1.0 / 255.0)).unwrap();
        assert_eq!(f.dims(), [1, 8, 16, 16]);
        // Zero padding breaks translation invariance only near borders.
        for ch in 0..8 {
            let centre = f.at(0, ch, 8, 8);
            for (y, x) in [(7, 7), (8, 9), (9, 8)] {
                assert!((f.at(0, ch, y, x) - centre).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn load_prior_resizes_coarse_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prior.sgt");
        sgt::write(&Tensor::<f32>::full([1, 4, 2, 3], 1.5), &p).unwrap();
        let m = load_prior(&p, (16, 24), 4).unwrap();
        assert_eq!(m.features.dims(), [1, 4, 16, 24]);
        assert!(m.features.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
        let exact = load_prior(&p, (2, 3), 4).unwrap();
        assert_eq!(exact.features.data(), Tensor::<f32>::full([1, 4, 2, 3], 1.5).data());
        assert!(matches!(load_prior(&p, (2, 3), 5), Err(Error::Config(_))));
        std::fs::write(&p, b"XGT1").unwrap();
        assert!(load_prior(&p, (2, 3), 4).is_err());
    }

    #[test]
    fn bundle_round_trip_is_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let v = VggSlice::random(SMALL, 9).unwrap();
        v.save(dir.path()).unwrap();
        let back = VggSlice::load(dir.path()).unwrap();
        assert_eq!(back, v);
        assert!(back.params().iter().all(|(_, p)| !p.trainable));
    }
}
