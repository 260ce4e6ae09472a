use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Adam, Optimizer, Sgd};
use super::schedule::ScheduleConfig;
use super::{Result, TrainError};
use crate::data::AugConfig;
use crate::nn::{EncoderSpec, Method};
use crate::objectives::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn build(&self) -> Box<dyn Optimizer + Send> {
        match *self {
            OptimizerConfig::Sgd {
                momentum, weight_decay, ..
            } => Box::new(Sgd::new(momentum as f32, weight_decay as f32)),
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => Box::new(Adam::new(beta1 as f32, beta2 as f32, eps as f32, weight_decay as f32)),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub augment: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            augment: seed,
        }
    }
}

/// Everything that determines a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub encoder: EncoderSpec,
    pub epochs_warmup: usize,
    pub epochs_joint: usize,
    pub batch_size: usize,
    pub lambda_ca: f64,
    pub tau: f64,
    pub lambda_bt: f64,
    /// EMA coefficient of the momentum encoder.
    pub ema_momentum: f64,
    pub queue_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub seeds: Seeds,
    pub val_fraction: f64,
    pub augment: AugConfig,
    /// Free-form label of the dataset the run consumes.
    pub dataset: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            method: Method::MocoV2,
            encoder: EncoderSpec::default(),
            epochs_warmup: 10,
            epochs_joint: 30,
            batch_size: 32,
            lambda_ca: w.lambda_ca,
            tau: w.tau,
            lambda_bt: w.lambda_bt,
            ema_momentum: 0.999,
            queue_size: 512,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::Cosine,
            seeds: Seeds::default(),
            val_fraction: 0.1,
            augment: AugConfig::default(),
            dataset: String::new(),
        }
    }
}

impl RunConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_ca: self.lambda_ca,
            tau: self.tau,
            lambda_bt: self.lambda_bt,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_warmup + self.epochs_joint
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights().validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.total_epochs() == 0 {
            return Err(TrainError::Config("at least one epoch is required".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Config(format!("val_fraction {} must lie in (0, 1)", self.val_fraction)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(TrainError::Config(format!("ema_momentum {} outside [0, 1]", self.ema_momentum)));
        }
        if self.method.uses_momentum() && (self.queue_size == 0 || self.queue_size % self.batch_size != 0) {
            return Err(TrainError::Config(format!(
                "queue_size {} must be a positive multiple of batch_size {}",
                self.queue_size, self.batch_size
            )));
        }
        if self.augment.out_size != self.encoder.input_size {
            return Err(TrainError::Config(format!(
                "augment.out_size {} differs from encoder input {}",
                self.augment.out_size, self.encoder.input_size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}
