//! U-Net style decoder over the encoder taps.

use super::encoder::{EncoderSpec, EncoderTaps};
use super::layers::{BatchNorm, Conv2d};
use super::params::{Ctx, ParamStore};
use super::Result;
use crate::rng::SplitMix64;
use crate::tensor::Var;

#[derive(Debug, Clone)]
struct UpBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl UpBlock {
    fn new(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, 1, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, false),
        }
    }

    /// Upsample `x` by two, concatenate `skip` along channels, then conv-BN-ReLU.
    fn forward(&self, ctx: &mut Ctx, x: Var, skip: Option<Var>) -> Result<Var> {
        let up = ctx.g.upsample2x(x)?;
        let h = match skip {
            Some(s) => ctx.g.concat(&[up, s])?,
            None => up,
        };
        let h = self.conv.forward(ctx, h)?;
        let h = self.bn.forward(ctx, h)?;
        Ok(ctx.g.relu(h))
    }
}

/// Mirrors the encoder: the deepest tap is upsampled stage by stage and
/// joined with the outputs of stages 3, 2 and 1; a last upsampling restores
/// the input resolution before a 1×1 convolution to one logit per pixel.
#[derive(Debug, Clone)]
pub struct Decoder {
    ups: Vec<UpBlock>,
    last: UpBlock,
    head: Conv2d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut SplitMix64, spec: &EncoderSpec) -> Self {
        let c = spec.stage_channels;
        let mut ups = Vec::new();
        let mut cin = c[3];
        for s in (0..3).rev() {
            ups.push(UpBlock::new(store, rng, &format!("decoder.up{}", s + 1), cin + c[s], c[s]));
            cin = c[s];
        }
        let out = (c[0] / 2).max(1);
        Self {
            ups,
            last: UpBlock::new(store, rng, "decoder.up0", cin, out),
            head: Conv2d::new(store, rng, "decoder.head", out, 1, 1, 1, true),
        }
    }

    /// Per-pixel logits shaped (N, 1, H, W).
    pub fn forward(&self, ctx: &mut Ctx, taps: &EncoderTaps) -> Result<Var> {
        let mut h = taps.layer(5);
        for (i, up) in self.ups.iter().enumerate() {
            h = up.forward(ctx, h, Some(taps.layer(4 - i)))?;
        }
        h = self.last.forward(ctx, h, None)?;
        self.head.forward(ctx, h)
    }
}
