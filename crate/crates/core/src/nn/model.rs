use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::decoder::Decoder;
use super::encoder::{Encoder, EncoderSpec, EncoderTaps};
use super::heads::{HeadSpec, Mlp};
use super::params::{Ctx, ParamStore};
use super::{NnError, Result};
use crate::analysis::FeatureMatrix;
use crate::data::Image;
use crate::par::{self, Exec};
use crate::rng::{self, SplitMix64};
use crate::tensor::{Graph, Var};

/// Instance-discrimination method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "moco_v2")]
    MocoV2,
    #[serde(rename = "barlow_twins")]
    BarlowTwins,
    #[serde(rename = "simsiam")]
    SimSiam,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::MocoV2, Method::BarlowTwins, Method::SimSiam];

    pub fn tag(self) -> &'static str {
        match self {
            Method::MocoV2 => "moco_v2",
            Method::BarlowTwins => "barlow_twins",
            Method::SimSiam => "simsiam",
        }
    }

    /// Only MoCo keeps a separate momentum copy; the other methods share
    /// weights between their two branches.
    pub fn uses_momentum(self) -> bool {
        self == Method::MocoV2
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| NnError::UnknownMethod(s.to_string()))
    }
}

/// Layer structure of a model. Holds parameter handles only; the values
/// live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Arch {
    pub method: Method,
    pub spec: EncoderSpec,
    pub heads: HeadSpec,
    encoder: Encoder,
    projector: Mlp,
    predictor: Option<Mlp>,
    decoder: Decoder,
}

impl Arch {
    pub fn encode(&self, ctx: &mut Ctx, x: Var) -> Result<EncoderTaps> {
        self.encoder.forward(ctx, x)
    }

    /// Global-average-pooled output of tap `layer`, shaped (N, C).
    pub fn pool(&self, ctx: &mut Ctx, taps: &EncoderTaps, layer: usize) -> Result<Var> {
        Ok(ctx.g.global_avg_pool(taps.layer(layer))?)
    }

    pub fn project(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        self.projector.forward(ctx, h)
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    pub fn predict(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        match &self.predictor {
            Some(p) => p.forward(ctx, z),
            None => Err(NnError::MissingHead { method: self.method, head: "predictor" }),
        }
    }

    /// Reconstruction logits with the input's spatial size.
    pub fn decode(&self, ctx: &mut Ctx, taps: &EncoderTaps) -> Result<Var> {
        self.decoder.forward(ctx, taps)
    }

    /// Encoder, pooling and projector in one pass.
    pub fn embed(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let taps = self.encode(ctx, x)?;
        let h = self.pool(ctx, &taps, 5)?;
        self.project(ctx, h)
    }
}

/// A model's structure with its online parameters and, for MoCo, the
/// momentum copy of encoder and projector.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arch,
    pub online: ParamStore,
    pub momentum: Option<ParamStore>,
}

pub const PARAM_PREFIXES: [&str; 4] = ["encoder.", "projector.", "predictor.", "decoder."];

impl Model {
    /// Deterministic construction from `seed`. Encoder and projector are
    /// created first so their handles are valid in the momentum store,
    /// which holds only those entries.
    pub fn build(method: Method, spec: &EncoderSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = SplitMix64::new(rng::derive(seed, "init"));
        let mut store = ParamStore::new();
        let heads = HeadSpec::for_method(method, spec.feature_dim());
        let encoder = Encoder::new(&mut store, &mut rng, spec);
        let projector = Mlp::new(&mut store, &mut rng, "projector", spec.feature_dim(), &heads.projector);
        let shared = store.len();
        let predictor = heads
            .predictor
            .as_ref()
            .map(|p| Mlp::new(&mut store, &mut rng, "predictor", projector.out_dim(), p));
        let decoder = Decoder::new(&mut store, &mut rng, spec);
        let momentum = method.uses_momentum().then(|| store.truncated(shared));
        Ok(Model {
            arch: Arch {
                method,
                spec: spec.clone(),
                heads,
                encoder,
                projector,
                predictor,
                decoder,
            },
            online: store,
            momentum,
        })
    }

    pub fn method(&self) -> Method {
        self.arch.method
    }

    /// SHA-256 of all online entries under `prefix` (e.g. `"decoder."`).
    pub fn hash_prefix(&self, prefix: &str) -> [u8; 32] {
        self.online.hash_prefix(prefix)
    }
}

/// `ξ ← m·ξ + (1 − m)·θ` for every trainable entry of `xi`, matched to
/// `theta` by name.
pub fn ema_update(theta: &ParamStore, xi: &mut ParamStore, m: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(NnError::Momentum(m));
    }
    let ids: Vec<_> = xi.iter().filter(|(_, e)| e.kind.trainable()).map(|(id, _)| id).collect();
    for id in ids {
        let name = &xi.entry(id).name;
        let src = theta
            .by_name(name)
            .ok_or_else(|| NnError::UnknownParameter(name.clone()))?;
        if src.shape() != xi.get(id).shape() {
            return Err(NnError::ShapeMismatch {
                name: name.clone(),
                expected: xi.get(id).shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        let src = src.data().to_vec();
        for (x, t) in xi.get_mut(id).data_mut().iter_mut().zip(src) {
            *x = m * *x + (1.0 - m) * t;
        }
    }
    Ok(())
}

/// Images per eval forward in [`extract_features`].
pub const EVAL_CHUNK: usize = 64;

/// GAP features of tap `layer` (1..=5) for each image, in eval mode.
pub fn extract_features(model: &Model, images: &[&Image], layer: usize) -> Result<FeatureMatrix> {
    if !(1..=5).contains(&layer) {
        return Err(NnError::Layer(layer));
    }
    let chunks: Vec<&[&Image]> = images.chunks(EVAL_CHUNK).collect();
    let exec = Exec::current();
    let parts = par::map(exec, &chunks, |chunk| -> Result<Vec<f32>> {
        let mut store = model.online.clone();
        let mut g = Graph::with_exec(Exec::Sequential);
        let mut ctx = Ctx::new(&mut g, &mut store, false, false);
        let x = ctx.g.constant(Image::batch_tensor(chunk.iter().copied()));
        let taps = model.arch.encode(&mut ctx, x)?;
        let f = model.arch.pool(&mut ctx, &taps, layer)?;
        Ok(ctx.g.value(f).data().to_vec())
    });
    let d = model.arch.spec.tap_channels(layer);
    let mut values = Vec::with_capacity(images.len() * d);
    for p in parts {
        values.extend(p?.into_iter().map(f64::from));
    }
    let ids = (0..images.len()).map(|i| i.to_string()).collect();
    Ok(FeatureMatrix::new(values, d, ids)?.with_layer(layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamId, ParamKind};

    fn image(v: f32) -> Image {
        Image::filled(32, 32, v)
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = EncoderSpec::default();
        let a = Model::build(Method::MocoV2, &spec, 7).unwrap();
        let b = Model::build(Method::MocoV2, &spec, 7).unwrap();
        assert_eq!(a.online, b.online);
        let c = Model::build(Method::MocoV2, &spec, 8).unwrap();
        assert_ne!(a.online, c.online);
    }

    #[test]
    fn heads_per_method() {
        let spec = EncoderSpec::default();
        let moco = Model::build(Method::MocoV2, &spec, 0).unwrap();
        assert!(moco.momentum.is_some() && !moco.arch.has_predictor());
        let bt = Model::build(Method::BarlowTwins, &spec, 0).unwrap();
        assert!(bt.momentum.is_none() && !bt.arch.has_predictor());
        let ss = Model::build(Method::SimSiam, &spec, 0).unwrap();
        assert!(ss.arch.has_predictor());
        assert!("byol".parse::<Method>().is_err());
        assert_eq!("simsiam".parse::<Method>().unwrap(), Method::SimSiam);
    }

    #[test]
    fn momentum_store_mirrors_encoder_and_projector() {
        let m = Model::build(Method::MocoV2, &EncoderSpec::default(), 3).unwrap();
        let xi = m.momentum.as_ref().unwrap();
        assert!(xi.iter().all(|(id, e)| {
            (e.name.starts_with("encoder.") || e.name.starts_with("projector.")) && m.online.entry(id) == e
        }));
        assert!(m.online.iter().any(|(_, e)| e.name.starts_with("decoder.")));
    }

    #[test]
    fn forward_shapes() {
        let m = Model::build(Method::SimSiam, &EncoderSpec::default(), 1).unwrap();
        let mut store = m.online.clone();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, true, true);
        let x = ctx.g.constant(Image::batch_tensor([&image(0.2), &image(0.7)]));
        let taps = m.arch.encode(&mut ctx, x).unwrap();
        let shapes: Vec<Vec<usize>> = (1..=5).map(|l| ctx.g.shape(taps.layer(l)).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 16, 16, 16], vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4], vec![2, 128, 2, 2]]
        );
        let h = m.arch.pool(&mut ctx, &taps, 5).unwrap();
        let z = m.arch.project(&mut ctx, h).unwrap();
        let p = m.arch.predict(&mut ctx, z).unwrap();
        assert_eq!(ctx.g.shape(p), &[2, 64]);
        let r = m.arch.decode(&mut ctx, &taps).unwrap();
        assert_eq!(ctx.g.shape(r), &[2, 1, 32, 32]);
    }

    #[test]
    fn ema_examples() {
        let mut theta = ParamStore::new();
        theta.add("w", ParamKind::Weight, crate::Tensor::scalar(4.0));
        let mut xi = ParamStore::new();
        xi.add("w", ParamKind::Weight, crate::Tensor::scalar(2.0));
        ema_update(&theta, &mut xi, 1.0).unwrap();
        assert_eq!(xi.get(ParamId(0)).item(), 2.0);
        ema_update(&theta, &mut xi, 0.5).unwrap();
        assert_eq!(xi.get(ParamId(0)).item(), 3.0);
        ema_update(&theta, &mut xi, 0.0).unwrap();
        assert_eq!(xi.get(ParamId(0)).item(), 4.0);
        assert!(ema_update(&theta, &mut xi, 1.5).is_err());
        let mut bad = ParamStore::new();
        bad.add("w", ParamKind::Weight, crate::Tensor::zeros(&[2]));
        assert!(matches!(ema_update(&theta, &mut bad, 0.5), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn constant_stem_feature_matches_hand_count() {
        let mut m = Model::build(Method::MocoV2, &EncoderSpec::default(), 0).unwrap();
        let id = m.online.id("encoder.stem.conv.weight").unwrap();
        m.online.get_mut(id).data_mut().fill(0.1);
        let f = extract_features(&m, &[&image(0.5)], 1).unwrap();
        // 32×32 input, stride 2, zero padding: the first output row and
        // column see two input rows/columns instead of three.
        let taps = (2.0 + 15.0 * 3.0f64).powi(2);
        let expected = 0.1 * 0.5 * taps / 256.0 / (1.0 + 1e-5f64).sqrt();
        assert_eq!(f.width(), 16);
        for &v in f.row(0) {
            assert!((v - expected).abs() < 1e-5, "{v} vs {expected}");
        }
    }

    #[test]
    fn eval_features_are_batch_invariant() {
        let m = Model::build(Method::MocoV2, &EncoderSpec::default(), 2).unwrap();
        let (a, b) = (image(0.3), image(0.8));
        let both = extract_features(&m, &[&a, &b, &a], 5).unwrap();
        let alone = extract_features(&m, &[&b], 5).unwrap();
        assert_eq!(both.width(), 128);
        assert_eq!(both.row(0), both.row(2));
        for (x, y) in both.row(1).iter().zip(alone.row(0)) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(extract_features(&m, &[&a], 6).is_err());
    }
}
