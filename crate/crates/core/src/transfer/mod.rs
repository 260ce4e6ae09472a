//! Fine-tuning harness: classification (mean AUC) and segmentation (Dice)
//! from pretrained or random initializations.

pub mod augment;
mod finetune;
mod metrics;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{mean_std, two_sample_ttest, TTest};
use crate::nn::EncoderSpec;
use crate::train::{OptimizerConfig, ScheduleConfig};

pub use finetune::{
    build_downstream, finetune, finetune_classification, finetune_with_model, finetune_segmentation, run_arm, subset_labels, Init,
    RunOutcome,
};
pub use metrics::{auc, dice, mean_auc, DICE_SMOOTH};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("invalid task: {0}")]
    Config(String),
    #[error("label subset of {size} images is smaller than one batch of {batch}")]
    SubsetTooSmall { size: usize, batch: usize },
    #[error("labels contain a single class; AUC undefined")]
    SingleClass,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sample '{0}' has no usable labels")]
    MissingLabels(String),
    #[error("sample '{0}' has no mask")]
    MissingMask(String),
    #[error("result CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, TransferError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

impl TaskKind {
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Classification => "auc",
            TaskKind::Segmentation => "dice",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamTask {
    pub kind: TaskKind,
    pub label_fraction: f64,
    /// Upper bound; early stopping usually ends the run sooner.
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    /// Defaults to Adam at 2e-4 (classification) or 1e-3 (segmentation).
    pub optimizer: Option<OptimizerConfig>,
    /// Defaults to plateau (classification) or cosine (segmentation).
    pub schedule: Option<ScheduleConfig>,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub encoder: EncoderSpec,
}

impl Default for DownstreamTask {
    fn default() -> Self {
        Self::classification()
    }
}

impl DownstreamTask {
    pub fn classification() -> Self {
        Self {
            kind: TaskKind::Classification,
            label_fraction: 1.0,
            epochs: 40,
            batch_size: 16,
            early_stop_patience: 10,
            optimizer: None,
            schedule: None,
            test_fraction: 0.2,
            split_seed: 0,
            encoder: EncoderSpec::default(),
        }
    }

    pub fn segmentation() -> Self {
        Self {
            kind: TaskKind::Segmentation,
            epochs: 30,
            ..Self::classification()
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        self.optimizer.unwrap_or_else(|| match self.kind {
            TaskKind::Classification => OptimizerConfig::adam(2e-4),
            TaskKind::Segmentation => OptimizerConfig::adam(1e-3),
        })
    }

    pub fn schedule(&self) -> ScheduleConfig {
        self.schedule.unwrap_or_else(|| match self.kind {
            TaskKind::Classification => ScheduleConfig::plateau(),
            TaskKind::Segmentation => ScheduleConfig::Cosine,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(TransferError::Config(format!("label_fraction {} outside (0, 1]", self.label_fraction)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(TransferError::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(TransferError::Config("epochs must be positive and batch_size at least 2".into()));
        }
        self.encoder.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("task serializes");
        Sha256::digest(json).into()
    }
}

/// Per-run metric values of one experimental arm.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub arm: String,
    pub metric: String,
    /// (seed, value) pairs in run order.
    pub runs: Vec<(u64, f64)>,
}

impl EvalResult {
    pub fn values(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.1).collect()
    }

    pub fn mean(&self) -> f64 {
        mean_std(&self.values()).0
    }

    /// Sample (n − 1) standard deviation.
    pub fn std(&self) -> f64 {
        mean_std(&self.values()).1
    }

    /// Welch's t-test of this arm against `baseline`.
    pub fn ttest(&self, baseline: &EvalResult) -> Result<TTest> {
        Ok(two_sample_ttest(&self.values(), &baseline.values())?)
    }
}

/// CSV `arm,seed,metric,value`.
pub fn write_eval_csv<W: Write>(w: W, results: &[EvalResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["arm", "seed", "metric", "value"])?;
    for r in results {
        for (seed, v) in &r.runs {
            out.write_record([r.arm.clone(), seed.to_string(), r.metric.clone(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads `arm,seed,metric,value` rows, grouping them by (arm, metric) in
/// order of first appearance.
pub fn read_eval_csv<R: Read>(r: R) -> Result<Vec<EvalResult>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()? != vec!["arm", "seed", "metric", "value"] {
        return Err(TransferError::Format("header must be arm,seed,metric,value".into()));
    }
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |f: &str| TransferError::Format(format!("row {}: bad {f}", i + 1));
        let seed = rec[1].trim().parse().map_err(|_| bad("seed"))?;
        let value = rec[3].trim().parse().map_err(|_| bad("value"))?;
        let key = (rec[0].to_string(), rec[2].to_string());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push((seed, value));
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let runs = groups.remove(&k).unwrap_or_default();
            EvalResult {
                arm: k.0,
                metric: k.1,
                runs,
            }
        })
        .collect())
}

/// CSV `arm_a,arm_b,t,p`.
pub fn write_significance_csv<W: Write>(w: W, rows: &[(String, String, TTest)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["arm_a", "arm_b", "t", "p"])?;
    for (a, b, t) in rows {
        out.write_record([a.clone(), b.clone(), t.t.to_string(), t.p.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
