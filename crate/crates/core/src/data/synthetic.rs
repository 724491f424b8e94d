//! Desk-scale stand-ins for natural image data.
//!
//! Every class owns a fixed pattern drawn from `pattern_seed`; samples draw
//! their amplitude, a blend with one other class's pattern, and pixel noise
//! from `seed`. Train and test splits built from different sample seeds but
//! the same pattern seed therefore come from the same distribution.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use robustdistill_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Sums of signed Gaussian bumps at class-specific positions.
    Gaussians,
    /// Rings of class-specific radius around a jittered center.
    Rings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub n: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub pattern_seed: u64,
    pub image_size: usize,
    /// Pattern contrast around the mid-gray background; larger separates
    /// classes further.
    pub margin: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Upper bound on the weight of the blended second-class pattern.
    pub mix: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Gaussians,
            n: 2000,
            num_classes: 5,
            seed: 0,
            pattern_seed: 0,
            image_size: 8,
            margin: 1.0,
            noise: 0.1,
            mix: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.n < self.num_classes {
            return Err(Error::Parameter(format!(
                "synthetic data needs n >= classes >= 2, got n={} classes={}",
                self.n, self.num_classes
            )));
        }
        if self.image_size < 2 || self.margin < 0.0 || self.noise < 0.0 || !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Parameter(format!(
                "synthetic size {} margin {} noise {} mix {} out of range",
                self.image_size, self.margin, self.noise, self.mix
            )));
        }
        Ok(())
    }
}

fn gaussian_patterns(cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pattern_seed);
    let s = cfg.image_size as f64;
    (0..cfg.num_classes)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let cy = rng.random_range(0.15..0.85) * s;
                    let cx = rng.random_range(0.15..0.85) * s;
                    let sigma = rng.random_range(0.08..0.2) * s;
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (cy, cx, sigma, sign)
                })
                .collect();
            let mut p: Vec<f64> = (0..cfg.image_size * cfg.image_size)
                .map(|i| {
                    let (y, x) = ((i / cfg.image_size) as f64 + 0.5, (i % cfg.image_size) as f64 + 0.5);
                    bumps
                        .iter()
                        .map(|&(cy, cx, sg, sign)| sign * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sg * sg)).exp())
                        .sum()
                })
                .collect();
            let peak = p.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            p.iter_mut().for_each(|v| *v /= peak);
            p
        })
        .collect()
}

fn ring(cfg: &SyntheticConfig, class: usize, cy: f64, cx: f64) -> Vec<f64> {
    let s = cfg.image_size as f64;
    let radius = (class as f64 + 1.0) / (cfg.num_classes as f64 + 1.0) * 0.45 * s;
    let width = 0.35 * s / (cfg.num_classes as f64 + 1.0) + 0.3;
    (0..cfg.image_size * cfg.image_size)
        .map(|i| {
            let (y, x) = ((i / cfg.image_size) as f64 + 0.5, (i % cfg.image_size) as f64 + 0.5);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            (-(d - radius).powi(2) / (2.0 * width * width)).exp() * 2.0 - 1.0
        })
        .collect()
}

/// Generates a balanced `[n, 1, size, size]` dataset.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(&mut rng);
    let patterns = match cfg.kind {
        SyntheticKind::Gaussians => gaussian_patterns(cfg),
        SyntheticKind::Rings => Vec::new(),
    };
    let pixels = cfg.image_size * cfg.image_size;
    let mut data = Vec::with_capacity(cfg.n * pixels);
    let half = cfg.image_size as f64 / 2.0;
    for &y in &labels {
        let amp = rng.random_range(0.75..1.25);
        let other = (y + rng.random_range(1..cfg.num_classes)) % cfg.num_classes;
        let w = rng.random_range(0.0..=cfg.mix);
        let (primary, secondary) = match cfg.kind {
            SyntheticKind::Gaussians => (patterns[y].clone(), patterns[other].clone()),
            SyntheticKind::Rings => {
                let jitter = 0.1 * cfg.image_size as f64;
                let cy = half + rng.random_range(-jitter..=jitter);
                let cx = half + rng.random_range(-jitter..=jitter);
                (ring(cfg, y, cy, cx), ring(cfg, other, cy, cx))
            }
        };
        for (a, b) in primary.iter().zip(&secondary) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = 0.5 + 0.5 * cfg.margin * amp * (a + w * b) / (1.0 + w) + cfg.noise * noise;
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let images = Tensor::new(vec![cfg.n, 1, cfg.image_size, cfg.image_size], data)?;
    Dataset::new(images, labels, cfg.num_classes, Split::Train)
}
