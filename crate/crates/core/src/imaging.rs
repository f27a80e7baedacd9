//! 8-bit rasters: file I/O, luma conversion, bicubic degradation and the
//! flip/rotation augmentations used for training.

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Float, Tensor};

/// Interleaved 8-bit raster with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("image", format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(
                "image",
                format!(
                    "{width}x{height}x{channels} needs {} bytes, got {}",
                    width * height * channels,
                    data.len()
                ),
            ));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        ImageBuffer {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Planar tensor `(1, channels, height, width)` holding `value * scale`.
    pub fn to_tensor<T: Float>(&self, scale: f64) -> Tensor<T> {
        Tensor::from_fn([1, self.channels, self.height, self.width], |_, c, y, x| {
            T::of(self.get(x, y, c) as f64 * scale)
        })
    }

    /// Inverse of [`ImageBuffer::to_tensor`]: divides by `scale`, clamps to
    /// `[0, 255]` and rounds. Uses sample 0 of the batch.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, scale: f64) -> Result<Self> {
        let [_, c, h, w] = t.dims();
        if c != 1 && c != 3 {
            return Err(Error::invalid("image", format!("{c}-channel tensor")));
        }
        Ok(Self::from_fn(w, h, c, |x, y, ch| {
            quantize(t.at(0, ch, y, x).as_f64() / scale)
        }))
    }

    /// Largest top-left crop whose sides are multiples of `r`.
    pub fn crop_to_multiple(&self, r: usize) -> Self {
        let (w, h) = (self.width / r * r, self.height / r * r);
        self.crop(0, 0, w, h)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self::from_fn(w, h, self.channels, |x, y, c| self.get(x0 + x, y0 + y, c))
    }
}

/// Clamp to `[0, 255]` and round half away from zero.
pub fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        ImageFormat::Pnm
    } else {
        return Err(Error::Format(format!(
            "{}: not a PNG or binary PPM/PGM file",
            path.display()
        )));
    };
    let img = image::load_from_memory_with_format(&bytes, format)?;
    Ok(from_dynamic(img))
}

fn from_dynamic(img: DynamicImage) -> ImageBuffer {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        ImageBuffer {
            width: w,
            height: h,
            channels: 3,
            data: img.into_rgb8().into_raw(),
        }
    } else {
        ImageBuffer {
            width: w,
            height: h,
            channels: 1,
            data: img.into_luma8().into_raw(),
        }
    }
}

/// Writes PNG for `.png` paths and binary PPM/PGM otherwise.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let color = if img.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer_with_format(
            path,
            &img.data,
            img.width as u32,
            img.height as u32,
            color,
            ImageFormat::Png,
        )?;
        return Ok(());
    }
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Studio-swing BT.601 luma in `[16, 235]` as a `(1, 1, h, w)` tensor.
/// Grayscale images pass through unchanged.
pub fn rgb_to_y(img: &ImageBuffer) -> Tensor<f64> {
    Tensor::from_fn([1, 1, img.height, img.width], |_, _, y, x| {
        if img.channels == 1 {
            return img.get(x, y, 0) as f64;
        }
        let (r, g, b) = (
            img.get(x, y, 0) as f64,
            img.get(x, y, 1) as f64,
            img.get(x, y, 2) as f64,
        );
        16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    })
}

/// Bicubic (antialiased) downscale by `r`, quantized back to 8 bits.
pub fn degrade_bicubic(hr: &ImageBuffer, r: usize) -> Result<ImageBuffer> {
    if r == 0 || !hr.width.is_multiple_of(r) || !hr.height.is_multiple_of(r) {
        return Err(Error::invalid(
            "degrade_bicubic",
            format!(
                "{}x{} is not divisible by scale {r}; crop first",
                hr.width, hr.height
            ),
        ));
    }
    let t: Tensor<f64> = hr.to_tensor(1.0);
    let lr = ops::bicubic_resize(&t, hr.height / r, hr.width / r)?;
    ImageBuffer::from_tensor(&lr, 1.0)
}

/// One of the eight flip/rotation isometries of the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    /// Quarter turns, clockwise.
    pub quarter_turns: u8,
    /// Horizontal flip, applied before the rotation.
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        quarter_turns: 0,
        flip: false,
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        Augmentation {
            quarter_turns: rng.gen_range(0..4),
            flip: rng.gen_bool(0.5),
        }
    }

    /// Maps an output coordinate to the source coordinate in an image of
    /// size `w x h`.
    fn source(self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        let (mut cw, mut ch) = self.out_dims(w, h);
        let (mut sx, mut sy) = (x, y);
        for _ in 0..self.quarter_turns % 4 {
            // A clockwise turn sends (x, y) of a W x H image to (H-1-y, x);
            // the pre-turn image had height `cw`.
            (sx, sy) = (sy, cw - 1 - sx);
            std::mem::swap(&mut cw, &mut ch);
        }
        if self.flip {
            sx = w - 1 - sx;
        }
        (sx, sy)
    }

    fn out_dims(self, w: usize, h: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (h, w)
        } else {
            (w, h)
        }
    }

    pub fn apply_tensor<T: Float>(self, t: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = t.dims();
        let (ow, oh) = self.out_dims(w, h);
        Tensor::from_fn([n, c, oh, ow], |b, ch, y, x| {
            let (sx, sy) = self.source(x, y, w, h);
            t.at(b, ch, sy, sx)
        })
    }

    pub fn apply_image(self, img: &ImageBuffer) -> ImageBuffer {
        let (ow, oh) = self.out_dims(img.width, img.height);
        ImageBuffer::from_fn(ow, oh, img.channels, |x, y, c| {
            let (sx, sy) = self.source(x, y, img.width, img.height);
            img.get(sx, sy, c)
        })
    }
}

/// Applies one random isometry to both members of an aligned pair.
pub fn augment<T: Float>(
    hr: &Tensor<T>,
    lr: &Tensor<T>,
    rng: &mut impl Rng,
) -> (Tensor<T>, Tensor<T>) {
    let a = Augmentation::random(rng);
    (a.apply_tensor(hr), a.apply_tensor(lr))
}
