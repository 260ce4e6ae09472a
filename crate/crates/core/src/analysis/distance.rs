use std::f64::consts::PI;
use std::io::Write;

use super::{AnalysisError, FeatureMatrix, Result};

pub const KDE_GRID_POINTS: usize = 256;
/// Grid margin beyond the sample range, in bandwidths.
pub const KDE_MARGIN: f64 = 3.0;

/// All unordered pairwise distances of L2-normalized rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub distances: Vec<f64>,
    pub mean: f64,
}

impl DistanceReport {
    /// KDE of the distances on the default grid.
    pub fn kde(&self) -> Result<KdeCurve> {
        kde_curve(&self.distances, KDE_GRID_POINTS, KDE_MARGIN)
    }
}

pub fn pairwise_distances(f: &FeatureMatrix) -> Result<DistanceReport> {
    let n = f.rows();
    if n < 2 {
        return Err(AnalysisError::TooFewSamples {
            op: "pairwise_distances",
            min: 2,
            got: n,
        });
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = f.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                r.to_vec()
            }
        })
        .collect();
    let mut distances = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            distances.push(d2.sqrt());
        }
    }
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    Ok(DistanceReport { distances, mean })
}

/// Scott's rule `h = n^(-1/5)·σ̂` with the sample (n − 1) standard deviation.
pub fn scott_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(AnalysisError::TooFewSamples { op: "gaussian_kde", min: 2, got: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let h = (n as f64).powf(-0.2) * var.sqrt();
    if !(h > 0.0) {
        return Err(AnalysisError::ZeroVariance("gaussian_kde"));
    }
    Ok(h)
}

/// Gaussian KDE evaluated at `grid` with Scott's bandwidth.
pub fn gaussian_kde(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let h = scott_bandwidth(samples)?;
    Ok(gaussian_kde_with_bandwidth(samples, grid, h))
}

pub fn gaussian_kde_with_bandwidth(samples: &[f64], grid: &[f64], h: f64) -> Vec<f64> {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * PI).sqrt());
    grid.iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

/// Density on `points` evenly spaced values over
/// `[min − margin·h, max + margin·h]`.
pub fn kde_curve(samples: &[f64], points: usize, margin: f64) -> Result<KdeCurve> {
    let h = scott_bandwidth(samples)?;
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - margin * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + margin * h;
    let step = (hi - lo) / (points.max(2) - 1) as f64;
    let grid: Vec<f64> = (0..points.max(2)).map(|i| lo + step * i as f64).collect();
    let density = gaussian_kde_with_bandwidth(samples, &grid, h);
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
    })
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Percent increase of the CAiD mean distance over the baseline's.
pub fn distance_gain(caid: &DistanceReport, base: &DistanceReport) -> Result<f64> {
    if base.mean == 0.0 {
        return Err(AnalysisError::ZeroBaseline);
    }
    Ok(100.0 * (caid.mean - base.mean) / base.mean)
}

/// CSV `label,x,density` with one block of rows per labelled curve.
pub fn write_kde_csv<W: Write>(w: W, curves: &[(&str, &KdeCurve)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["label", "x", "density"])?;
    for (label, c) in curves {
        for (x, d) in c.grid.iter().zip(&c.density) {
            out.write_record([label.to_string(), x.to_string(), d.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
