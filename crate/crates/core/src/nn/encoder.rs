//! Mini-ResNet encoder with five feature taps.

use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d};
use super::params::{Ctx, ParamStore};
use super::{NnError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub input_size: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
            input_size: 32,
        }
    }
}

impl EncoderSpec {
    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Channel count at tap `layer` (1 = stem, 2..=5 = residual stages).
    pub fn tap_channels(&self, layer: usize) -> usize {
        if layer == 1 {
            self.stem_channels
        } else {
            self.stage_channels[layer - 2]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(NnError::Spec(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.blocks_per_stage == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(NnError::Spec("channel and block counts must be positive".into()));
        }
        Ok(())
    }
}

/// Two 3×3 convolutions with a residual connection. The second batch norm
/// starts with zero scale so a fresh block passes its shortcut through.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, rng, &format!("{name}.down.conv"), cin, cout, 1, stride, false),
                BatchNorm::new(store, &format!("{name}.down.bn"), cout, false),
            )
        });
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, false),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout, false),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout, true),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.g.add(h, skip)?;
        Ok(ctx.g.relu(sum))
    }
}

/// Outputs of the five taps: stem, then the end of each residual stage.
#[derive(Debug, Clone, Copy)]
pub struct EncoderTaps(pub [Var; 5]);

impl EncoderTaps {
    pub fn layer(&self, layer: usize) -> Var {
        self.0[layer - 1]
    }

    pub fn last(&self) -> Var {
        self.0[4]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    /// Stride-2 stem, then four stages; stages 2 to 4 halve the resolution.
    pub fn new(store: &mut ParamStore, rng: &mut SplitMix64, spec: &EncoderSpec) -> Self {
        let stem = Conv2d::new(store, rng, "encoder.stem.conv", 1, spec.stem_channels, 3, 2, false);
        let stem_bn = BatchNorm::new(store, "encoder.stem.bn", spec.stem_channels, false);
        let mut cin = spec.stem_channels;
        let mut stages = Vec::new();
        for (s, &cout) in spec.stage_channels.iter().enumerate() {
            let blocks = (0..spec.blocks_per_stage)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let block_in = if b == 0 { cin } else { cout };
                    BasicBlock::new(store, rng, &format!("encoder.stage{}.{b}", s + 1), block_in, cout, stride)
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        Self { stem, stem_bn, stages }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<EncoderTaps> {
        let h = self.stem.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let mut h = ctx.g.relu(h);
        let mut taps = [h; 5];
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                h = b.forward(ctx, h)?;
            }
            taps[s + 1] = h;
        }
        Ok(EncoderTaps(taps))
    }
}
