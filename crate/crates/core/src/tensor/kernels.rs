//! Slice-level compute kernels behind the graph ops.

use super::Element;
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn out_pixels(&self) -> usize {
        self.hout * self.wout
    }

    /// Rows of the unfolded input: one per (input channel, ky, kx).
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Columns of the unfolded input: one per (image, output pixel).
    pub fn col_cols(&self) -> usize {
        self.n * self.out_pixels()
    }
}

/// Unfolds `x` (N, Cin, H, W) into a (Cin·k·k, N·Hout·Wout) matrix.
pub(crate) fn im2col<T: Element>(exec: Exec, g: &ConvGeom, x: &[T]) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    let hw = g.h * g.w;
    let opix = g.out_pixels();
    par::for_each_chunk_mut(exec, &mut out, cols, |r, row| {
        let ci = r / (g.k * g.k);
        let ky = (r / g.k) % g.k;
        let kx = r % g.k;
        for n in 0..g.n {
            let src = &x[(n * g.cin + ci) * hw..(n * g.cin + ci + 1) * hw];
            let dst = &mut row[n * opix..(n + 1) * opix];
            for oy in 0..g.hout {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let iy = iy as usize;
                for ox in 0..g.wout {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        dst[oy * g.wout + ox] = src[iy * g.w + ix as usize];
                    }
                }
            }
        }
    });
    out
}

/// Folds a (Cin·k·k, N·Hout·Wout) gradient matrix back onto (N, Cin, H, W),
/// summing overlapping windows.
pub(crate) fn col2im<T: Element>(exec: Exec, g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let opix = g.out_pixels();
    let ncols = g.col_cols();
    let mut out = vec![T::zero(); g.n * g.cin * hw];
    par::for_each_chunk_mut(exec, &mut out, hw, |idx, plane| {
        let n = idx / g.cin;
        let ci = idx % g.cin;
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &cols[r * ncols + n * opix..r * ncols + (n + 1) * opix];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy * g.w + ix as usize] += src[oy * g.wout + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

/// (C, N·P) -> (N, C, P)
pub(crate) fn channel_major_to_batch_major<T: Element>(
    src: &[T],
    n: usize,
    c: usize,
    p: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for ci in 0..c {
        for ni in 0..n {
            let s = &src[ci * n * p + ni * p..ci * n * p + (ni + 1) * p];
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p].copy_from_slice(s);
        }
    }
    out
}

/// (N, C, P) -> (C, N·P)
pub(crate) fn batch_major_to_channel_major<T: Element>(
    src: &[T],
    n: usize,
    c: usize,
    p: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for ni in 0..n {
        for ci in 0..c {
            let s = &src[(ni * c + ci) * p..(ni * c + ci + 1) * p];
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p].copy_from_slice(s);
        }
    }
    out
}

pub(crate) fn upsample2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    out
}

/// Per-channel mean and biased variance of an (N, C, S) layout.
pub(crate) fn channel_moments<T: Element>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * s).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                acc += v;
            }
        }
        let m = acc / count;
        let mut sq = T::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[ci] = m;
        var[ci] = sq / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.out_pixels()];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.hout {
                    for ox in 0..g.wout {
                        let mut s = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        s += x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                            * w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                                    }
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.hout + oy) * g.wout + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
            let (h, w) = (5, 6);
            let g = ConvGeom {
                n: 2,
                cin: 3,
                h,
                w,
                cout: 4,
                k,
                stride,
                pad,
                hout: (h + 2 * pad - k) / stride + 1,
                wout: (w + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f64> = (0..g.n * g.cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..g.cout * g.col_rows()).map(|i| ((i * 13 % 7) as f64) * 0.25).collect();
            let cols = im2col(Exec::Sequential, &g, &x);
            let mut outc = vec![0.0; g.cout * g.col_cols()];
            f64::gemm(
                g.cout,
                g.col_rows(),
                g.col_cols(),
                &wt,
                (g.col_rows() as isize, 1),
                &cols,
                (g.col_cols() as isize, 1),
                0.0,
                &mut outc,
                (g.col_cols() as isize, 1),
            );
            let out = channel_major_to_batch_major(&outc, g.n, g.cout, g.out_pixels());
            assert_eq!(out, naive_conv(&g, &x, &wt));
        }
    }

    #[test]
    fn permutes_are_inverse() {
        let v: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let a = batch_major_to_channel_major(&v, 2, 3, 4);
        assert_eq!(channel_major_to_batch_major(&a, 2, 3, 4), v);
    }
}
