use rand::Rng;
use robustdistill_tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: bool,
    pub horizontal_flip_prob: f64,
}

impl Default for AugmentConfig {
    /// Disabled.
    fn default() -> Self {
        Self {
            pad: 0,
            crop: false,
            horizontal_flip_prob: 0.0,
        }
    }
}

impl AugmentConfig {
    /// Pad-4 random crop plus horizontal flips.
    pub fn standard() -> Self {
        Self {
            pad: 4,
            crop: true,
            horizontal_flip_prob: 0.5,
        }
    }

    pub fn is_identity(&self) -> bool {
        (!self.crop || self.pad == 0) && self.horizontal_flip_prob <= 0.0
    }
}

/// One `[C, H, W]` image zero-padded by `pad` and cropped back to `H x W`
/// at offset `(dy, dx)` into the padded image.
pub fn crop_at(image: &[f32], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Mirrors one `[C, H, W]` image left to right.
pub fn hflip(image: &[f32], shape: [usize; 3]) -> Vec<f32> {
    let [_, _, w] = shape;
    image
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Applies random crop and flip independently to each image of an
/// `[N, C, H, W]` batch. Non-image batches pass through unchanged.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<f32> {
    if cfg.is_identity() || batch.ndim() != 4 {
        return batch.clone();
    }
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    let mut out = batch.clone();
    for i in 0..out.rows() {
        let mut img = batch.row(i).to_vec();
        if cfg.crop && cfg.pad > 0 {
            let dy = rng.random_range(0..=2 * cfg.pad);
            let dx = rng.random_range(0..=2 * cfg.pad);
            img = crop_at(&img, shape, cfg.pad, dy, dx);
        }
        if cfg.horizontal_flip_prob > 0.0 && rng.random_bool(cfg.horizontal_flip_prob.min(1.0)) {
            img = hflip(&img, shape);
        }
        out.row_mut(i).copy_from_slice(&img);
    }
    out
}
