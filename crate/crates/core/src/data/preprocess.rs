//! Resize, unit-scale and channel-standardize images; training-time
//! flip and pad-crop augmentation.

use image::imageops::{self, FilterType};
use image::{DynamicImage, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-channel mean/std applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub height: usize,
    pub width: usize,
    pub norm: Normalization,
    /// Padding before random cropping.
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            height: 256,
            width: 128,
            norm: Normalization::default(),
            pad: 10,
            flip_prob: 0.5,
        }
    }
}

/// Preprocess an arbitrary decoded image; rejects anything that is not
/// three-channel.
pub fn preprocess(image: &DynamicImage, cfg: &PreprocessConfig) -> Result<Tensor> {
    let channels = image.color().channel_count();
    if channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected a 3-channel image, got {channels} channel(s)"
        )));
    }
    Ok(preprocess_rgb(&image.to_rgb8(), cfg))
}

/// Resize to `height × width`, then `(v / 255 − mean) / std` per channel.
/// Output is a `[3, height, width]` tensor.
pub fn preprocess_rgb(image: &RgbImage, cfg: &PreprocessConfig) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let resized;
    let src = if image.height() as usize == h && image.width() as usize == w {
        image
    } else {
        resized = imageops::resize(image, w as u32, h as u32, FilterType::Triangle);
        &resized
    };
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for (x, y, px) in src.enumerate_pixels() {
        for c in 0..3 {
            let v = f64::from(px[c]) / 255.0;
            data[(c * h + y as usize) * w + x as usize] = (v - cfg.norm.mean[c]) / cfg.norm.std[c];
        }
    }
    out
}

/// One draw of the augmentation randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Crop origin inside the padded image, each in `0..=2·pad`.
    pub offset_y: usize,
    pub offset_x: usize,
}

impl AugmentParams {
    pub fn draw(cfg: &PreprocessConfig, rng: &mut Rng) -> Self {
        let flip = rng.gen_bool(cfg.flip_prob);
        let offset_y = rng.gen_range(0..=2 * cfg.pad);
        let offset_x = rng.gen_range(0..=2 * cfg.pad);
        AugmentParams { flip, offset_y, offset_x }
    }
}

/// Horizontal flip, then zero-pad by `pad` and crop back to the original
/// size at the given offset.
pub fn augment_with(image: &Tensor, pad: usize, p: AugmentParams) -> Tensor {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => panic!("augment expects [C, H, W]"),
    };
    let mut out = Tensor::zeros(image.shape());
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + p.offset_y) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + p.offset_x) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if p.flip { w - 1 - sx as usize } else { sx as usize };
                dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx];
            }
        }
    }
    out
}

pub fn augment(image: &Tensor, cfg: &PreprocessConfig, rng: &mut Rng) -> Tensor {
    let p = AugmentParams::draw(cfg, rng);
    augment_with(image, cfg.pad, p)
}
