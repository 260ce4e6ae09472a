//! Two-crop view generation with replayable provenance.
//!
//! A sample `S` yields two random crops `s_c` and `s'_c` (resized back to the
//! network input size), augmented views `x` and `x'` of those crops, and a
//! corrupted copy of `x` (cutout and patch shuffling) that feeds the
//! reconstruction branch. The reconstruction target is always the clean
//! crop `s_c`.
//!
//! Every random decision is drawn from a SplitMix64 sub-stream of the pair
//! seed, and the concrete parameters are recorded as [`AugRecord`]s so that
//! [`replay`] reproduces any view exactly.

use serde::{Deserialize, Serialize};

use super::{DataError, Image, ImageSample, Result};
use crate::par::{self, Exec};
use crate::rng::{derive, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub crop_size: usize,
    pub out_size: usize,
    pub p_flip: f64,
    pub p_jitter: f64,
    pub jitter_scale: (f64, f64),
    pub jitter_shift: (f64, f64),
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    pub p_cutout: f64,
    /// Area fraction range of one cutout rectangle.
    pub cutout_fraction: (f64, f64),
    pub max_cutouts: usize,
    pub p_shuffle: f64,
    pub shuffle_grid: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_size: 24,
            out_size: 32,
            p_flip: 0.5,
            p_jitter: 0.5,
            jitter_scale: (0.6, 1.4),
            jitter_shift: (-0.2, 0.2),
            p_blur: 0.5,
            blur_sigma: (0.1, 1.0),
            p_cutout: 0.5,
            cutout_fraction: (0.10, 0.25),
            max_cutouts: 2,
            p_shuffle: 0.5,
            shuffle_grid: 4,
        }
    }
}

impl AugConfig {
    /// Every stochastic augmentation switched off (crops remain).
    pub fn disabled() -> Self {
        Self {
            p_flip: 0.0,
            p_jitter: 0.0,
            p_blur: 0.0,
            p_cutout: 0.0,
            p_shuffle: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    Crop { top: usize, left: usize, size: usize, out_size: usize },
    Flip,
    Jitter { scale: f32, shift: f32 },
    Blur { sigma: f32 },
    Cutout { rects: Vec<Rect>, fill: f32 },
    Shuffle { grid: usize, perm: Vec<usize> },
}

/// One applied augmentation and the sub-stream seed its parameters came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub op: AugOp,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Crop of the source sample producing `s_c`.
    pub crop: AugRecord,
    /// Crop of the source sample producing `s'_c`.
    pub crop_prime: AugRecord,
    /// Applied to `s_c` to produce `x`.
    pub view: Vec<AugRecord>,
    /// Applied to `s'_c` to produce `x'`.
    pub view_prime: Vec<AugRecord>,
    /// Applied to `x` to produce the reconstruction input.
    pub corruption: Vec<AugRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub s_c: Image,
    pub s_c_prime: Image,
    pub x: Image,
    pub x_prime: Image,
    /// Corrupted `x`, the reconstruction branch's input.
    pub corrupted: Image,
    pub provenance: Provenance,
}

pub fn jitter(img: &Image, scale: f32, shift: f32) -> Image {
    let px = img.pixels().iter().map(|&p| (scale * p + shift).clamp(0.0, 1.0)).collect();
    Image::new(img.height(), img.width(), px)
}

/// 3×3 normalized Gaussian blur with replicated borders.
pub fn blur(img: &Image, sigma: f32) -> Image {
    let w1 = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [w1, 1.0, w1];
    let norm: f32 = k.iter().sum();
    let k = k.map(|v| v / norm);
    let (h, w) = (img.height(), img.width());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (d, kv) in k.iter().enumerate() {
                s += kv * img.get(y, clampi(x as isize + d as isize - 1, w));
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (d, kv) in k.iter().enumerate() {
                s += kv * tmp[clampi(y as isize + d as isize - 1, h) * w + x];
            }
            out[y * w + x] = s.clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, out)
}

pub fn cutout(img: &Image, rects: &[Rect], fill: f32) -> Image {
    let mut out = img.clone();
    for r in rects {
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                out.set(y, x, fill);
            }
        }
    }
    out
}

/// Moves grid patch `perm[i]` of `img` into slot `i`.
pub fn shuffle_patches(img: &Image, grid: usize, perm: &[usize]) -> Result<Image> {
    check_grid(img, grid)?;
    if perm.len() != grid * grid {
        return Err(DataError::Replay(format!("permutation of {} for a {grid}x{grid} grid", perm.len())));
    }
    let p = img.height() / grid;
    let mut out = img.clone();
    for (slot, &src) in perm.iter().enumerate() {
        let (sy, sx) = ((slot / grid) * p, (slot % grid) * p);
        let (ty, tx) = ((src / grid) * p, (src % grid) * p);
        for y in 0..p {
            for x in 0..p {
                out.set(sy + y, sx + x, img.get(ty + y, tx + x));
            }
        }
    }
    Ok(out)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_grid(img: &Image, grid: usize) -> Result<()> {
    let side = img.height();
    if grid == 0 || img.width() != side || side % grid != 0 {
        return Err(DataError::GridMismatch { side, grid });
    }
    Ok(())
}

/// Applies a single recorded augmentation.
pub fn apply(op: &AugOp, img: &Image) -> Result<Image> {
    Ok(match op {
        AugOp::Crop { top, left, size, out_size } => {
            if top + size > img.height() || left + size > img.width() {
                return Err(DataError::CropTooLarge {
                    crop: *size,
                    height: img.height(),
                    width: img.width(),
                });
            }
            img.crop(*top, *left, *size, *size).resize_bilinear(*out_size, *out_size)
        }
        AugOp::Flip => img.flip_horizontal(),
        AugOp::Jitter { scale, shift } => jitter(img, *scale, *shift),
        AugOp::Blur { sigma } => blur(img, *sigma),
        AugOp::Cutout { rects, fill } => {
            if rects.iter().any(|r| r.top + r.height > img.height() || r.left + r.width > img.width()) {
                return Err(DataError::Replay("cutout rectangle outside the image".into()));
            }
            cutout(img, rects, *fill)
        }
        AugOp::Shuffle { grid, perm } => shuffle_patches(img, *grid, perm)?,
    })
}

/// Re-applies recorded augmentations in order.
pub fn replay(records: &[AugRecord], img: &Image) -> Result<Image> {
    records.iter().try_fold(img.clone(), |acc, r| apply(&r.op, &acc))
}

fn crop_record(img: &Image, cfg: &AugConfig, seed: u64) -> Result<AugRecord> {
    let size = cfg.crop_size;
    if size == 0 || size > img.height() || size > img.width() {
        return Err(DataError::CropTooLarge {
            crop: size,
            height: img.height(),
            width: img.width(),
        });
    }
    let mut r = SplitMix64::new(seed);
    let top = r.range_inclusive(0, img.height() - size);
    let left = r.range_inclusive(0, img.width() - size);
    Ok(AugRecord {
        op: AugOp::Crop {
            top,
            left,
            size,
            out_size: cfg.out_size,
        },
        seed,
    })
}

/// Two independent random crops, each resized to `cfg.out_size`.
pub fn two_crop(img: &Image, cfg: &AugConfig, seed: u64) -> Result<((Image, AugRecord), (Image, AugRecord))> {
    let a = crop_record(img, cfg, derive(seed, "crop"))?;
    let b = crop_record(img, cfg, derive(seed, "crop_prime"))?;
    Ok(((apply(&a.op, img)?, a), (apply(&b.op, img)?, b)))
}

/// Flip, brightness/contrast jitter and blur, each with its own probability.
pub fn augment_view(crop: &Image, cfg: &AugConfig, seed: u64) -> (Image, Vec<AugRecord>) {
    let mut records = Vec::new();

    let s = derive(seed, "flip");
    if SplitMix64::new(s).bernoulli(cfg.p_flip) {
        records.push(AugRecord { op: AugOp::Flip, seed: s });
    }

    let s = derive(seed, "jitter");
    let mut r = SplitMix64::new(s);
    if r.bernoulli(cfg.p_jitter) {
        let scale = r.uniform(cfg.jitter_scale.0, cfg.jitter_scale.1) as f32;
        let shift = r.uniform(cfg.jitter_shift.0, cfg.jitter_shift.1) as f32;
        records.push(AugRecord {
            op: AugOp::Jitter { scale, shift },
            seed: s,
        });
    }

    let s = derive(seed, "blur");
    let mut r = SplitMix64::new(s);
    if r.bernoulli(cfg.p_blur) {
        let sigma = r.uniform(cfg.blur_sigma.0, cfg.blur_sigma.1) as f32;
        records.push(AugRecord {
            op: AugOp::Blur { sigma },
            seed: s,
        });
    }

    let out = replay(&records, crop).expect("view augmentations are total");
    (out, records)
}

fn draw_rect(r: &mut SplitMix64, side: usize, (lo, hi): (f64, f64)) -> Rect {
    let area = (side * side) as f64;
    let frac = r.uniform(lo, hi);
    let aspect = r.uniform(0.5, 2.0);
    let target = frac * area;
    let min_px = (lo * area).ceil() as usize;
    let max_px = (hi * area).floor() as usize;
    let height = ((target * aspect).sqrt().round() as usize).clamp(1, side);
    let mut width = ((target / height as f64).round() as usize).clamp(1, side);
    // Keep the realized area inside the configured fraction range.
    while height * width > max_px && width > 1 {
        width -= 1;
    }
    while height * width < min_px && width < side {
        width += 1;
    }
    Rect {
        top: r.range_inclusive(0, side - height),
        left: r.range_inclusive(0, side - width),
        height,
        width,
    }
}

/// Cutout (1 to `max_cutouts` rectangles filled with `fill`) followed by
/// grid patch shuffling, each applied with its own probability.
pub fn context_corrupt(crop: &Image, cfg: &AugConfig, fill: f32, seed: u64) -> Result<(Image, Vec<AugRecord>)> {
    check_grid(crop, cfg.shuffle_grid)?;
    let side = crop.height();
    let mut records = Vec::new();

    let s = derive(seed, "cutout");
    let mut r = SplitMix64::new(s);
    if r.bernoulli(cfg.p_cutout) && cfg.max_cutouts > 0 {
        let count = r.range_inclusive(1, cfg.max_cutouts);
        let rects = (0..count).map(|_| draw_rect(&mut r, side, cfg.cutout_fraction)).collect();
        records.push(AugRecord {
            op: AugOp::Cutout { rects, fill },
            seed: s,
        });
    }

    let s = derive(seed, "shuffle");
    let mut r = SplitMix64::new(s);
    if r.bernoulli(cfg.p_shuffle) {
        let g = cfg.shuffle_grid;
        records.push(AugRecord {
            op: AugOp::Shuffle {
                grid: g,
                perm: r.permutation(g * g),
            },
            seed: s,
        });
    }

    Ok((replay(&records, crop)?, records))
}

/// The full `(s_c, s'_c, x, x', corrupted x)` bundle for one sample.
pub fn make_pair(sample: &ImageSample, cfg: &AugConfig, fill: f32, seed: u64) -> Result<AugmentedPair> {
    let ((s_c, crop), (s_c_prime, crop_prime)) = two_crop(&sample.image, cfg, seed)?;
    let (x, view) = augment_view(&s_c, cfg, derive(seed, "view"));
    let (x_prime, view_prime) = augment_view(&s_c_prime, cfg, derive(seed, "view_prime"));
    let (corrupted, corruption) = context_corrupt(&x, cfg, fill, derive(seed, "corrupt"))?;
    Ok(AugmentedPair {
        s_c,
        s_c_prime,
        x,
        x_prime,
        corrupted,
        provenance: Provenance {
            crop,
            crop_prime,
            view,
            view_prime,
            corruption,
        },
    })
}

/// Builds pairs for `samples[i]` with seed `seed_of(i)`, preserving order.
pub fn make_pairs<F>(
    exec: Exec,
    samples: &[&ImageSample],
    cfg: &AugConfig,
    fill: f32,
    seed_of: F,
) -> Result<Vec<AugmentedPair>>
where
    F: Fn(usize) -> u64 + Sync + Send,
{
    par::map_range(exec, samples.len(), |i| make_pair(samples[i], cfg, fill, seed_of(i)))
        .into_iter()
        .collect()
}
