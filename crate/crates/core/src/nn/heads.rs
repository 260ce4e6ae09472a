//! Projector and predictor MLPs.

use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Linear};
use super::params::{Ctx, ParamStore};
use super::{Method, Result};
use crate::rng::SplitMix64;
use crate::tensor::Var;

/// One fully connected layer of a head: linear, optional batch norm, optional ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out: usize,
    pub norm: bool,
    pub relu: bool,
}

impl LayerSpec {
    const fn new(out: usize, norm: bool, relu: bool) -> Self {
        Self { out, norm, relu }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub method: Method,
    pub projector: Vec<LayerSpec>,
    pub predictor: Option<Vec<LayerSpec>>,
}

/// Width of the final embedding of every projector.
pub const PROJ_DIM: usize = 64;

impl HeadSpec {
    /// Desk-scale heads for a backbone producing `feat`-wide features.
    pub fn for_method(method: Method, feat: usize) -> Self {
        let (projector, predictor) = match method {
            Method::MocoV2 => (
                vec![LayerSpec::new(feat, false, true), LayerSpec::new(PROJ_DIM, false, false)],
                None,
            ),
            Method::BarlowTwins => (
                vec![
                    LayerSpec::new(feat, true, true),
                    LayerSpec::new(feat, true, true),
                    LayerSpec::new(PROJ_DIM, false, false),
                ],
                None,
            ),
            Method::SimSiam => (
                vec![
                    LayerSpec::new(feat, true, true),
                    LayerSpec::new(feat, true, true),
                    LayerSpec::new(PROJ_DIM, true, false),
                ],
                Some(vec![
                    LayerSpec::new(PROJ_DIM / 4, true, true),
                    LayerSpec::new(PROJ_DIM, false, false),
                ]),
            ),
        };
        Self {
            method,
            projector,
            predictor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(Linear, Option<BatchNorm>, bool)>,
    out_dim: usize,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, din: usize, spec: &[LayerSpec]) -> Self {
        let mut d = din;
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let lin = Linear::new(store, rng, &format!("{name}.{i}.linear"), d, l.out);
                let bn = l.norm.then(|| BatchNorm::new(store, &format!("{name}.{i}.bn"), l.out, false));
                d = l.out;
                (lin, bn, l.relu)
            })
            .collect();
        Self { layers, out_dim: d }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for (lin, bn, relu) in &self.layers {
            x = lin.forward(ctx, x)?;
            if let Some(bn) = bn {
                x = bn.forward(ctx, x)?;
            }
            if *relu {
                x = ctx.g.relu(x);
            }
        }
        Ok(x)
    }
}
