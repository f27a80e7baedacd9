mod common;

use std::path::PathBuf;

use common::*;
use sgglc_core::imaging::ImageBuffer;
use sgglc_core::ops::{self, ConvSpec};
use sgglc_core::prior::{self, PriorSource, VggSlice};
use sgglc_core::{sgt, Tensor};

const WIDTHS: [usize; 4] = [4, 6, 8, 8];

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/vgg_features_32.sgt")
}

fn input() -> ImageBuffer {
    ImageBuffer::from_fn(32, 32, 3, |x, y, c| ((x * 7 + y * 13 + c * 50 + x * y) % 256) as u8)
}

/// The truncated stack written out layer by layer.
fn reference(vgg: &VggSlice, x: &T64) -> T64 {
    let p = vgg.params().cast::<f64>();
    let conv = |y: &T64, l: &str| {
        let w = p.value(&format!("{l}.weight")).unwrap();
        let b = p.value(&format!("{l}.bias")).unwrap();
        ops::conv2d(y, w, Some(b), ConvSpec::same(3)).unwrap()
    };
    let pool = |y: &T64| ops::max_pool(y, 2, 2, 0).unwrap().0;
    let mean = [0.485, 0.456, 0.406];
    let std = [0.229, 0.224, 0.225];
    let mut y = Tensor::from_fn(x.dims(), |n, c, h, w| (x.at(n, c, h, w) - mean[c]) / std[c]);
    for l in ["conv1_1", "conv1_2"] {
        y = relu(&conv(&y, l));
    }
    y = pool(&y);
    for l in ["conv2_1", "conv2_2"] {
        y = relu(&conv(&y, l));
    }
    y = pool(&y);
    for l in ["conv3_1", "conv3_2", "conv3_3", "conv3_4"] {
        y = relu(&conv(&y, l));
    }
    y = pool(&y);
    y = relu(&conv(&y, "conv4_1"));
    conv(&y, "conv4_2")
}

#[test]
fn features_match_layer_by_layer_reference() {
    let vgg = VggSlice::random(WIDTHS, 42).unwrap();
    let x: T64 = input().to_tensor(1.0 / 255.0);
    let got = vgg.features(&x).unwrap();
    assert_eq!(got.dims(), [1, 8, 4, 4]);
    assert_close(&got, &reference(&vgg, &x), 1e-12, "vgg");
}

#[test]
fn features_match_golden_file() {
    let vgg = VggSlice::random(WIDTHS, 42).unwrap();
    let x: T64 = input().to_tensor(1.0 / 255.0);
    let f64_features = vgg.features(&x).unwrap();
    if std::env::var_os("SGGLC_REGEN_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        sgt::write(&f64_features.cast::<f32>(), golden_path()).unwrap();
    }
    let golden: T64 = sgt::read::<f32>(golden_path()).unwrap().cast();
    assert_close(&f64_features, &golden, 1e-5, "f64 path vs golden");
    let f32_features = vgg.features(&input().to_tensor::<f32>(1.0 / 255.0)).unwrap().cast::<f64>();
    assert_close(&f32_features, &golden, 1e-4, "f32 path vs golden");
}

#[test]
fn grayscale_is_replicated() {
    let vgg = VggSlice::random(WIDTHS, 1).unwrap();
    let gray = ImageBuffer::from_fn(16, 16, 1, |x, y, _| (x * 16 + y) as u8);
    let rgb = ImageBuffer::from_fn(16, 16, 3, |x, y, _| gray.get(x, y, 0));
    let (a, b) = (
        vgg.features(&gray.to_tensor::<f64>(1.0 / 255.0)).unwrap(),
        vgg.features(&rgb.to_tensor::<f64>(1.0 / 255.0)).unwrap(),
    );
    assert_eq!(a.data(), b.data());
}

#[test]
fn extracted_prior_is_aligned_with_the_input() {
    let vgg = VggSlice::random(WIDTHS, 2).unwrap();
    let img = ImageBuffer::from_fn(20, 12, 3, |x, y, c| (x + y + c) as u8);
    let p = prior::extract_prior(&img, &vgg).unwrap();
    assert_eq!(p.source, PriorSource::Extractor);
    assert_eq!(p.features.dims(), [1, 8, 12, 20]);
    assert!(p.check_aligned(12, 20).is_ok());
    assert!(p.check_aligned(12, 21).is_err());
    let tiny = ImageBuffer::from_fn(7, 9, 3, |_, _, _| 0);
    assert!(prior::extract_prior(&tiny, &vgg).is_err());
}

#[test]
fn loading_checks_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let vgg = VggSlice::random(WIDTHS, 3).unwrap();
    vgg.save(dir.path()).unwrap();
    assert_eq!(VggSlice::load(dir.path()).unwrap().widths(), WIDTHS);
    std::fs::remove_file(dir.path().join("conv3_2.weight.sgt")).unwrap();
    assert!(VggSlice::load(dir.path()).is_err());
}
