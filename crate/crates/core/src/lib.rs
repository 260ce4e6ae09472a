//! Context-aware instance discrimination (CAiD) at desk scale.
//!
//! The crate pairs an instance-discrimination objective (MoCo-v2, Barlow
//! Twins or SimSiam) with a reconstruction branch that restores the original
//! crop from a corrupted view, trained jointly as `λ·L_ca + L_id`. Around the
//! pretraining loop it provides everything needed to run the evaluation
//! protocol end to end on synthetic grayscale images:
//!
//! - [`tensor`]: dense tensors and a reverse-mode differentiation graph.
//! - [`data`]: PGM/CSV datasets, the synthetic generator and augmentations.
//! - [`nn`]: the mini-ResNet encoder, projector/predictor heads, U-Net decoder.
//! - [`objectives`]: InfoNCE with a key queue, Barlow Twins, SimSiam, L2.
//! - [`train`]: optimizers, schedules, checkpoints and the pretraining engine.
//! - [`analysis`]: feature distances with KDE, linear CKA, Welch's t-test.
//! - [`transfer`]: fine-tuning harness with AUC and Dice evaluation.

pub mod analysis;
pub mod data;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use tensor::{Graph, Tensor, Var};
