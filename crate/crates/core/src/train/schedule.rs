//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant,
    Cosine,
    Plateau { patience: usize, factor: f64 },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Cosine
    }
}

impl ScheduleConfig {
    pub fn plateau() -> Self {
        ScheduleConfig::Plateau { patience: 5, factor: 0.5 }
    }

    /// Instantiates the schedule; `total_steps` is used by the cosine form.
    pub fn build(&self, lr0: f64, total_steps: usize) -> Result<LrSchedule> {
        Ok(match *self {
            ScheduleConfig::Constant => LrSchedule::Constant { lr: lr0 },
            ScheduleConfig::Cosine => LrSchedule::cosine(lr0, total_steps)?,
            ScheduleConfig::Plateau { patience, factor } => LrSchedule::plateau(lr0, patience, factor)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `lr(t) = lr0·½(1 + cos(πt/T))`.
    Cosine {
        lr0: f64,
        total: usize,
    },
    /// Multiplies the rate by `factor` once the monitored loss has failed to
    /// improve for `patience` consecutive epochs.
    Plateau {
        lr: f64,
        patience: usize,
        factor: f64,
        best: f64,
        bad_epochs: usize,
    },
}

impl LrSchedule {
    pub fn cosine(lr0: f64, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(TrainError::Config("cosine schedule needs T > 0".into()));
        }
        Ok(LrSchedule::Cosine { lr0, total })
    }

    pub fn plateau(lr: f64, patience: usize, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(TrainError::Config(format!("plateau factor {factor} must lie in (0, 1)")));
        }
        Ok(LrSchedule::Plateau {
            lr,
            patience,
            factor,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// Rate for optimizer step `t` (0-based).
    pub fn lr(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::Plateau { lr, .. } => lr,
            LrSchedule::Cosine { lr0, total } => {
                let t = t.min(total) as f64;
                lr0 * 0.5 * (1.0 + (PI * t / total as f64).cos())
            }
        }
    }

    /// Reports an epoch's validation loss. Only the plateau form reacts.
    pub fn observe(&mut self, val_loss: f64) {
        if let LrSchedule::Plateau {
            lr,
            patience,
            factor,
            best,
            bad_epochs,
        } = self
        {
            if val_loss < *best {
                *best = val_loss;
                *bad_epochs = 0;
            } else {
                *bad_epochs += 1;
                if *bad_epochs >= *patience {
                    *lr *= *factor;
                    *bad_epochs = 0;
                }
            }
        }
    }
}
