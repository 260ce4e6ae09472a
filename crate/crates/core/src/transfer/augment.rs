//! Light augmentations for fine-tuning.

use crate::data::Image;
use crate::rng::{derive, SplitMix64};

fn sample_clamped(img: &Image, y: f32, x: f32) -> f32 {
    let h = img.height() as f32;
    let w = img.width() as f32;
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
    let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image centre, bilinear, replicating the border.
pub fn rotate(img: &Image, radians: f32) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (s, c) = radians.sin_cos();
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            // inverse mapping
            let sy = c * dy - s * dx + cy;
            let sx = s * dy + c * dx + cx;
            out.set(y, x, sample_clamped(img, sy, sx));
        }
    }
    out
}

/// Smooth displacement field: random offsets on a coarse grid, bilinearly
/// upsampled. Returns (dy, dx) per pixel.
pub fn smooth_field(h: usize, w: usize, grid: usize, amplitude: f32, seed: u64) -> Vec<(f32, f32)> {
    let mut rng = SplitMix64::new(seed);
    let g = grid.max(2);
    let coarse: Vec<(f32, f32)> = (0..g * g)
        .map(|_| {
            (
                rng.uniform(-f64::from(amplitude), f64::from(amplitude)) as f32,
                rng.uniform(-f64::from(amplitude), f64::from(amplitude)) as f32,
            )
        })
        .collect();
    let mut field = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y as f32 * (g - 1) as f32 / (h.max(2) - 1) as f32;
        let (y0, fy) = (gy.floor() as usize, gy - gy.floor());
        let y1 = (y0 + 1).min(g - 1);
        for x in 0..w {
            let gx = x as f32 * (g - 1) as f32 / (w.max(2) - 1) as f32;
            let (x0, fx) = (gx.floor() as usize, gx - gx.floor());
            let x1 = (x0 + 1).min(g - 1);
            let lerp = |f: fn(&(f32, f32)) -> f32| {
                let a = f(&coarse[y0 * g + x0]) * (1.0 - fx) + f(&coarse[y0 * g + x1]) * fx;
                let b = f(&coarse[y1 * g + x0]) * (1.0 - fx) + f(&coarse[y1 * g + x1]) * fx;
                a * (1.0 - fy) + b * fy
            };
            field.push((lerp(|p| p.0), lerp(|p| p.1)));
        }
    }
    field
}

/// Resamples `img` at positions displaced by `field`.
pub fn warp(img: &Image, field: &[(f32, f32)]) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = field[y * w + x];
            out.set(y, x, sample_clamped(img, y as f32 + dy, x as f32 + dx));
        }
    }
    out
}

/// Random crop of side `crop` (at least 1) resized back, optional flip,
/// rotation within ±`max_deg` degrees.
pub fn classification_view(img: &Image, seed: u64, crop: usize, max_deg: f32) -> Image {
    let mut rng = SplitMix64::new(derive(seed, "cls"));
    let (h, w) = (img.height(), img.width());
    let crop = crop.clamp(1, h.min(w));
    let top = rng.below((h - crop + 1) as u64) as usize;
    let left = rng.below((w - crop + 1) as u64) as usize;
    let mut out = img.crop(top, left, crop, crop).resize_bilinear(h, w);
    if rng.bernoulli(0.5) {
        out = out.flip_horizontal();
    }
    let deg = rng.uniform(-f64::from(max_deg), f64::from(max_deg)) as f32;
    rotate(&out, deg.to_radians())
}

/// Brightness/contrast change of the image and a shared elastic-like warp
/// of image and mask. The warped mask is re-binarized at 0.5.
pub fn segmentation_view(img: &Image, mask: &Image, seed: u64) -> (Image, Image) {
    let mut rng = SplitMix64::new(derive(seed, "seg"));
    let contrast = rng.uniform(0.8, 1.2) as f32;
    let brightness = rng.uniform(-0.1, 0.1) as f32;
    let mut tone = img.clone();
    for p in tone.pixels_mut() {
        *p = (*p * contrast + brightness).clamp(0.0, 1.0);
    }
    let field = smooth_field(img.height(), img.width(), 4, 1.5, derive(seed, "warp"));
    let out = warp(&tone, &field);
    let mut m = warp(mask, &field);
    for p in m.pixels_mut() {
        *p = if *p >= 0.5 { 1.0 } else { 0.0 };
    }
    (out, m)
}
