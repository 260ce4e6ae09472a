//! Synthetic stand-in for chest radiographs.
//!
//! Every image shares the same "anatomy": a dark background with two soft
//! bright ellipses. Each class owns a small textured patch at a fixed site
//! inside the ellipses; an image carries the patches of its positive labels,
//! and its segmentation mask is the union of those patch squares. Images are
//! therefore globally near-identical and differ mostly in local texture.
//!
//! `noise` scales every per-image perturbation: additive pixel noise
//! (standard deviation `noise`), a global anatomy gain and a small jitter of
//! the patch positions. With `noise = 0` the image is a pure function of its
//! label set.

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Image, ImageSample, Result};
use crate::rng::{derive_index, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: i64,
    pub size: usize,
    pub classes: usize,
    pub noise: f64,
    /// Probability that each non-primary class is also present.
    pub extra_label_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 500,
            size: 32,
            classes: 4,
            noise: 0.05,
            extra_label_prob: 0.3,
        }
    }
}

pub const MAX_CLASSES: usize = 8;

const BACKGROUND: f32 = 0.15;
const ANATOMY: f32 = 0.45;
const TEXTURE_AMPLITUDE: f32 = 0.2;

/// Fractional (row, column) of each class patch's top-left corner.
const SITES: [(f32, f32); MAX_CLASSES] = [
    (0.22, 0.19),
    (0.52, 0.19),
    (0.22, 0.56),
    (0.52, 0.56),
    (0.37, 0.19),
    (0.37, 0.56),
    (0.62, 0.25),
    (0.62, 0.50),
];

fn anatomy(size: usize, y: usize, x: usize) -> f32 {
    let s = size as f32;
    let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
    let mut v = 0.0f32;
    for cx in [0.32 * s, 0.68 * s] {
        let dy = (py - 0.5 * s) / (0.36 * s);
        let dx = (px - cx) / (0.15 * s);
        let r2 = dx * dx + dy * dy;
        v = v.max(((1.0 - r2) * 4.0).clamp(0.0, 1.0));
    }
    v
}

/// Texture value of class `c` at patch-local coordinates.
fn texture(c: usize, y: usize, x: usize, patch: usize) -> f32 {
    let period = if c < 4 { 2 } else { 4 };
    let on = |v: usize| (v / (period / 2)) % 2 == 0;
    match c % 4 {
        0 => if on(y) { 1.0 } else { -1.0 },
        1 => if on(x) { 1.0 } else { -1.0 },
        2 => if on(x) ^ on(y) { 1.0 } else { -1.0 },
        _ => {
            let h = (patch as f32 - 1.0) / 2.0;
            let r2 = ((y as f32 - h).powi(2) + (x as f32 - h).powi(2)) / (h * h).max(1.0);
            2.0 * (-2.0 * r2).exp() - 0.5
        }
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class{c}")).collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if cfg.n <= 0 {
        return Err(DataError::Config(format!("n must be positive, got {}", cfg.n)));
    }
    if cfg.classes == 0 || cfg.classes > MAX_CLASSES {
        return Err(DataError::Config(format!(
            "classes must be in 1..={MAX_CLASSES}, got {}",
            cfg.classes
        )));
    }
    if cfg.size < 16 {
        return Err(DataError::Config(format!("size must be at least 16, got {}", cfg.size)));
    }
    if !(cfg.noise >= 0.0) || !(0.0..=1.0).contains(&cfg.extra_label_prob) {
        return Err(DataError::Config("noise must be >= 0 and extra_label_prob in [0, 1]".into()));
    }
    let size = cfg.size;
    let patch = size / 4;
    let noise = cfg.noise as f32;
    let max_jitter = (size / 16) as i64;
    let base: Vec<f32> = (0..size * size).map(|i| anatomy(size, i / size, i % size)).collect();

    let samples = (0..cfg.n as usize)
        .map(|i| {
            let s = derive_index(seed, i as u64);
            let mut lab = SplitMix64::stream(s, "labels");
            let mut pix = SplitMix64::stream(s, "noise");
            let mut geo = SplitMix64::stream(s, "jitter");

            let primary = lab.below(cfg.classes as u64) as usize;
            let labels: Vec<bool> = (0..cfg.classes)
                .map(|c| {
                    let extra = lab.bernoulli(cfg.extra_label_prob);
                    c == primary || extra
                })
                .collect();

            let gain = 1.0 + 2.0 * noise * geo.normal() as f32;
            let mut pixels: Vec<f32> = base.iter().map(|&a| BACKGROUND + ANATOMY * gain * a).collect();
            let mut mask = vec![0.0f32; size * size];
            for (c, _) in labels.iter().enumerate().filter(|(_, &on)| on) {
                let jitter = |r: &mut SplitMix64| {
                    ((f64::from(noise) * 20.0 * r.normal()).round() as i64).clamp(-max_jitter, max_jitter)
                };
                let (fy, fx) = SITES[c];
                let top = ((fy * size as f32) as i64 + jitter(&mut geo)).clamp(0, (size - patch) as i64) as usize;
                let left = ((fx * size as f32) as i64 + jitter(&mut geo)).clamp(0, (size - patch) as i64) as usize;
                for y in 0..patch {
                    for x in 0..patch {
                        let k = (top + y) * size + left + x;
                        pixels[k] += TEXTURE_AMPLITUDE * texture(c, y, x, patch);
                        mask[k] = 1.0;
                    }
                }
            }
            for p in pixels.iter_mut() {
                let n = if noise > 0.0 { noise * pix.normal() as f32 } else { 0.0 };
                *p = (*p + n).clamp(0.0, 1.0);
            }
            ImageSample {
                id: format!("syn{i:05}"),
                image: Image::new(size, size, pixels),
                labels: Some(labels),
                mask: Some(Image::new(size, size, mask)),
            }
        })
        .collect();
    Ok(Dataset {
        classes: class_names(cfg.classes),
        samples,
    })
}
