//! Encoder, heads, decoder and their parameter storage.

mod decoder;
mod encoder;
mod heads;
mod layers;
mod model;
mod params;

use thiserror::Error;

pub use decoder::Decoder;
pub use encoder::{Encoder, EncoderSpec, EncoderTaps};
pub use heads::{HeadSpec, LayerSpec, Mlp, PROJ_DIM};
pub use layers::{BatchNorm, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use model::{ema_update, extract_features, Arch, Method, Model, EVAL_CHUNK, PARAM_PREFIXES};
pub use params::{collect_grads, Ctx, ParamEntry, ParamGrads, ParamId, ParamKind, ParamStore};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown method '{0}' (expected moco_v2, barlow_twins or simsiam)")]
    UnknownMethod(String),
    #[error("invalid encoder spec: {0}")]
    Spec(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("parameter '{name}': expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("EMA coefficient {0} outside [0, 1]")]
    Momentum(f32),
    #[error("layer {0} is not a tap (expected 1..=5)")]
    Layer(usize),
    #[error("{method} model has no {head}")]
    MissingHead { method: Method, head: &'static str },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
}

pub type Result<T> = std::result::Result<T, NnError>;
