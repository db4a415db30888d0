use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::groundtruth::Point;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub crop_size: usize,
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_size: 256,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

/// Mirrors the image left-right; a point at `x` moves to `W - x`. Points
/// landing on the right edge (`x == 0` before the flip) leave the half-open
/// image and are dropped.
pub fn hflip(item: &AnnotatedImage) -> AnnotatedImage {
    let (c, h, w) = item.image.chw().expect("image is [3,H,W]");
    let src = item.image.data();
    let mut data = Vec::with_capacity(src.len());
    for row in 0..c * h {
        data.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    let points = item
        .points
        .iter()
        .map(|p| Point::new(w as f64 - p.x, p.y))
        .filter(|p| p.x < w as f64)
        .collect();
    AnnotatedImage {
        name: item.name.clone(),
        image: Tensor::new(item.image.shape(), data).expect("same shape"),
        points,
    }
}

fn crop(item: &AnnotatedImage, top: usize, left: usize, size: usize) -> AnnotatedImage {
    let (c, h, w) = item.image.chw().expect("image is [3,H,W]");
    let src = item.image.data();
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in top..top + size {
            let start = (ch * h + r) * w + left;
            data.extend_from_slice(&src[start..start + size]);
        }
    }
    let s = size as f64;
    let points = item
        .points
        .iter()
        .map(|p| Point::new(p.x - left as f64, p.y - top as f64))
        .filter(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < s && p.y < s)
        .collect();
    AnnotatedImage {
        name: item.name.clone(),
        image: Tensor::new(&[c, size, size], data).expect("sized"),
        points,
    }
}

/// Uniform random square crop followed by a horizontal flip with
/// probability `hflip_prob`.
pub fn augment<R: Rng>(item: &AnnotatedImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<AnnotatedImage> {
    let (h, w) = (item.height(), item.width());
    if cfg.crop_size == 0 || !cfg.crop_size.is_multiple_of(8) {
        return Err(Error::arg(format!("crop size {} must be a positive multiple of 8", cfg.crop_size)));
    }
    if cfg.crop_size > h.min(w) {
        return Err(Error::arg(format!("crop {} does not fit a {h}x{w} image", cfg.crop_size)));
    }
    let top = rng.random_range(0..=h - cfg.crop_size);
    let left = rng.random_range(0..=w - cfg.crop_size);
    let out = crop(item, top, left, cfg.crop_size);
    Ok(if rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0)) { hflip(&out) } else { out })
}
