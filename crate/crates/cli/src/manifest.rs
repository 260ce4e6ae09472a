//! Experiment manifest: one JSON file holding every knob of a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use caid::data::SyntheticConfig;
use caid::train::RunConfig;
use caid::transfer::{DownstreamTask, TaskKind};
use serde::{de, Deserialize, Deserializer, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
    pub pretrain: PathBuf,
    pub finetune: PathBuf,
    pub analysis: PathBuf,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            root: PathBuf::from("runs"),
            data: PathBuf::from("data"),
            pretrain: PathBuf::from("pretrain"),
            finetune: PathBuf::from("finetune"),
            analysis: PathBuf::from("analysis"),
        }
    }
}

impl Layout {
    pub fn resolve(&self, sub: &Path) -> PathBuf {
        self.root.join(sub)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentManifest {
    /// Seed of the synthetic dataset.
    pub seed: u64,
    pub data: SyntheticConfig,
    pub pretrain: RunConfig,
    #[serde(deserialize_with = "classification_task")]
    pub classification: DownstreamTask,
    #[serde(deserialize_with = "segmentation_task")]
    pub segmentation: DownstreamTask,
    pub layout: Layout,
}

/// Overlays the keys given in the manifest on the task's own defaults, so a
/// partial `segmentation` block keeps segmentation settings.
fn overlay<'de, D: Deserializer<'de>>(d: D, base: DownstreamTask) -> Result<DownstreamTask, D::Error> {
    let given = serde_json::Map::<String, Value>::deserialize(d)?;
    let mut merged = match serde_json::to_value(base).map_err(de::Error::custom)? {
        Value::Object(m) => m,
        _ => unreachable!("tasks serialize as objects"),
    };
    merged.extend(given);
    DownstreamTask::deserialize(Value::Object(merged)).map_err(de::Error::custom)
}

fn classification_task<'de, D: Deserializer<'de>>(d: D) -> Result<DownstreamTask, D::Error> {
    overlay(d, DownstreamTask::classification())
}

fn segmentation_task<'de, D: Deserializer<'de>>(d: D) -> Result<DownstreamTask, D::Error> {
    overlay(d, DownstreamTask::segmentation())
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SyntheticConfig::default(),
            pretrain: RunConfig::default(),
            classification: DownstreamTask::classification(),
            segmentation: DownstreamTask::segmentation(),
            layout: Layout::default(),
        }
    }
}

impl ExperimentManifest {
    /// Reads and validates a manifest; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let m: Self = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading manifest {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("manifest {}", p.display()))?
            }
            None => Self::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.n <= 0 {
            bail!("data.n must be positive, got {}", self.data.n);
        }
        self.pretrain.validate().context("pretrain")?;
        if self.classification.kind != TaskKind::Classification {
            bail!("classification.kind must be \"classification\"");
        }
        if self.segmentation.kind != TaskKind::Segmentation {
            bail!("segmentation.kind must be \"segmentation\"");
        }
        self.classification.validate().context("classification")?;
        self.segmentation.validate().context("segmentation")?;
        Ok(())
    }

    pub fn task(&self, kind: TaskKind) -> &DownstreamTask {
        match kind {
            TaskKind::Classification => &self.classification,
            TaskKind::Segmentation => &self.segmentation,
        }
    }
}
