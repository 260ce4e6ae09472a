//! Feature-space analysis: pairwise distances with KDE, linear CKA and
//! Welch's t-test.

mod cka;
mod distance;
mod features;
mod stats;

use thiserror::Error;

pub use cka::{cka_reuse_table, linear_cka, write_cka_csv, CkaRow};
pub use distance::{
    distance_gain, gaussian_kde, gaussian_kde_with_bandwidth, kde_curve, pairwise_distances, scott_bandwidth,
    trapezoid, write_kde_csv, DistanceReport, KdeCurve, KDE_GRID_POINTS, KDE_MARGIN,
};
pub use features::FeatureMatrix;
pub use stats::{mean_std, two_sample_ttest, TTest};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{op} needs at least {min} samples, got {got}")]
    TooFewSamples { op: &'static str, min: usize, got: usize },
    #[error("feature values must be finite")]
    NonFinite,
    #[error("feature matrix has {len} values, not a multiple of width {width} for {rows} ids")]
    Shape { len: usize, width: usize, rows: usize },
    #[error("{0}: samples have zero variance (degenerate distribution)")]
    ZeroVariance(&'static str),
    #[error("baseline mean distance is zero")]
    ZeroBaseline,
    #[error("CKA undefined: centered {0} matrix is all zeros")]
    DegenerateCka(&'static str),
    #[error("row count mismatch: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("feature CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(Box<crate::nn::NnError>),
}

impl From<crate::nn::NnError> for AnalysisError {
    fn from(e: crate::nn::NnError) -> Self {
        AnalysisError::Model(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, AnalysisError>;
