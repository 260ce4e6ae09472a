use std::io::Write;

use super::{AnalysisError, FeatureMatrix, Result};
use crate::data::Image;
use crate::nn::{extract_features, Model};

fn centered(f: &FeatureMatrix) -> Vec<f64> {
    let (n, d) = (f.rows(), f.width());
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(f.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    f.values()
        .chunks(d)
        .flat_map(|r| r.iter().zip(&means).map(|(v, m)| v - m))
        .collect()
}

/// Squared Frobenius norm of `Aᵀ·B` for row-major n×da and n×db matrices.
fn cross_frob2(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut acc = 0.0;
    for p in 0..da {
        for q in 0..db {
            let s: f64 = (0..n).map(|i| a[i * da + p] * b[i * db + q]).sum();
            acc += s * s;
        }
    }
    acc
}

/// Linear CKA `‖YᵀX‖²_F / (‖XᵀX‖_F·‖YᵀY‖_F)` on column-centered inputs.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    let n = x.rows();
    if n != y.rows() {
        return Err(AnalysisError::RowMismatch(n, y.rows()));
    }
    if n < 2 {
        return Err(AnalysisError::TooFewSamples { op: "linear_cka", min: 2, got: n });
    }
    let (cx, cy) = (centered(x), centered(y));
    if cx.iter().all(|&v| v == 0.0) {
        return Err(AnalysisError::DegenerateCka("X"));
    }
    if cy.iter().all(|&v| v == 0.0) {
        return Err(AnalysisError::DegenerateCka("Y"));
    }
    let (dx, dy) = (x.width(), y.width());
    let xy = cross_frob2(&cy, dy, &cx, dx, n);
    let xx = cross_frob2(&cx, dx, &cx, dx, n).sqrt();
    let yy = cross_frob2(&cy, dy, &cy, dy, n).sqrt();
    Ok(xy / (xx * yy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CkaRow {
    pub layer: usize,
    pub cka: f64,
}

/// Per-layer CKA between the features of two models on the same probes.
pub fn cka_reuse_table(before: &Model, after: &Model, probes: &[&Image]) -> Result<Vec<CkaRow>> {
    let enc = |m: &Model| {
        m.online
            .iter()
            .filter(|(_, e)| e.name.starts_with("encoder."))
            .map(|(_, e)| (e.name.clone(), e.value.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    if enc(before) != enc(after) {
        return Err(AnalysisError::Architecture("encoders differ in parameter names or shapes".into()));
    }
    (1..=5)
        .map(|layer| {
            let a = extract_features(before, probes, layer)?;
            let b = extract_features(after, probes, layer)?;
            Ok(CkaRow {
                layer,
                cka: linear_cka(&a, &b)?,
            })
        })
        .collect()
}

/// CSV `layer,cka`.
pub fn write_cka_csv<W: Write>(w: W, rows: &[CkaRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "cka"])?;
    for r in rows {
        out.write_record([r.layer.to_string(), r.cka.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
