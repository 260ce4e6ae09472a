//! Datasets and the two-crop augmentation pipeline.

pub mod augment;
mod image;
mod manifest;
pub mod pgm;
pub mod synthetic;

pub use augment::{AugConfig, AugOp, AugRecord, AugmentedPair, Provenance};
pub use image::Image;
pub use manifest::{load_dataset, load_dataset_dir, write_dataset, CLASSES_FILE, MANIFEST_FILE};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::path::PathBuf;

use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported PGM variant {0:?} (only binary P5 is read)")]
    UnsupportedPgm(String),
    #[error("malformed PGM: {0}")]
    MalformedPgm(String),
    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },
    #[error("manifest row {row}: label {label:?} is not a declared class")]
    UnknownLabel { row: usize, label: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("crop of {crop} pixels does not fit a {height}x{width} image")]
    CropTooLarge { crop: usize, height: usize, width: usize },
    #[error("image side {side} is not divisible by shuffle grid {grid}")]
    GridMismatch { side: usize, grid: usize },
    #[error("replay: {0}")]
    Replay(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One grayscale image with optional multi-label targets and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    /// One entry per declared class, `true` when present.
    pub labels: Option<Vec<bool>>,
    /// Binary mask with the image's geometry, values 0 or 1.
    pub mask: Option<Image>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean pixel value over every image.
    pub fn mean_pixel(&self) -> f32 {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for s in &self.samples {
            sum += s.image.pixels().iter().map(|&p| f64::from(p)).sum::<f64>();
            n += s.image.pixels().len();
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64) as f32
        }
    }

    /// A dataset holding the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Seeded shuffle, then the first `floor(len * fraction)` indices go to the
    /// first part and the rest to the second.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        SplitMix64::stream(seed, "split").shuffle(&mut idx);
        let cut = ((self.len() as f64) * fraction).floor() as usize;
        (self.select(&idx[..cut]), self.select(&idx[cut..]))
    }
}
