//! The pretraining loop: discrimination warm-up, then joint training with
//! the reconstruction branch.

use std::fmt;
use std::io::Write;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::Optimizer;
use super::{Result, TrainError};
use crate::data::augment::make_pairs;
use crate::data::{AugmentedPair, Dataset, Image, ImageSample};
use crate::nn::{collect_grads, ema_update, Ctx, Method, Model, ParamId, PROJ_DIM};
use crate::objectives::{self, Queue};
use crate::par::Exec;
use crate::rng::{self, SplitMix64};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        })
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based epoch.
    pub epoch: usize,
    pub phase: Phase,
    pub l_id: f32,
    pub l_ca: Option<f32>,
    pub loss: f32,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

/// CSV `epoch,phase,train_loss,val_loss,lr`.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[EpochMetrics]) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "phase", "train_loss", "val_loss", "lr"])?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.lr.to_string(),
        ])?;
    }
    out.flush()
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    /// Final state of the trained model.
    pub model: Model,
    pub queue: Option<Queue>,
}

struct Batch {
    x: Tensor<f32>,
    x_prime: Tensor<f32>,
    corrupted: Tensor<f32>,
    s_c: Tensor<f32>,
}

impl Batch {
    fn new(pairs: &[AugmentedPair]) -> Self {
        Self {
            x: Image::batch_tensor(pairs.iter().map(|p| &p.x)),
            x_prime: Image::batch_tensor(pairs.iter().map(|p| &p.x_prime)),
            corrupted: Image::batch_tensor(pairs.iter().map(|p| &p.corrupted)),
            s_c: Image::batch_tensor(pairs.iter().map(|p| &p.s_c)),
        }
    }
}

/// A forward pass with its loss nodes, ready for backward.
struct Forward {
    g: Graph<f32>,
    bindings: Vec<(ParamId, Var)>,
    total: Var,
    l_id: f32,
    l_ca: Option<f32>,
    /// Momentum keys of the batch (MoCo only).
    keys: Option<Tensor<f32>>,
}

fn momentum_keys(model: &mut Model, x_prime: &Tensor<f32>, train: bool, exec: Exec) -> Result<Tensor<f32>> {
    let store = model
        .momentum
        .as_mut()
        .ok_or_else(|| TrainError::Config("model has no momentum encoder".into()))?;
    let mut g = Graph::with_exec(exec);
    let mut ctx = Ctx::new(&mut g, store, train, false);
    let x = ctx.g.constant(x_prime.clone());
    let z = model.arch.embed(&mut ctx, x)?;
    let z = ctx.g.l2_normalize(z)?;
    Ok(ctx.g.value(z).clone())
}

fn forward(
    model: &mut Model,
    cfg: &RunConfig,
    batch: &Batch,
    phase: Phase,
    queue: Option<&Queue>,
    train: bool,
    exec: Exec,
) -> Result<Forward> {
    let keys = match model.method() {
        Method::MocoV2 => Some(momentum_keys(model, &batch.x_prime, train, exec)?),
        _ => None,
    };
    let mut g = Graph::with_exec(exec);
    let mut ctx = Ctx::new(&mut g, &mut model.online, train, train);
    let arch = &model.arch;
    let x = ctx.g.constant(batch.x.clone());
    let l_id = match arch.method {
        Method::MocoV2 => {
            let q = arch.embed(&mut ctx, x)?;
            let q = ctx.g.l2_normalize(q)?;
            let k = ctx.g.constant(keys.clone().expect("keys computed above"));
            let negatives = queue.map(Queue::ordered).unwrap_or_else(|| Tensor::zeros(&[0, PROJ_DIM]));
            objectives::info_nce(ctx.g, q, k, &negatives, cfg.tau)?
        }
        Method::BarlowTwins => {
            let xp = ctx.g.constant(batch.x_prime.clone());
            let za = arch.embed(&mut ctx, x)?;
            let zb = arch.embed(&mut ctx, xp)?;
            objectives::barlow_twins(ctx.g, za, zb, cfg.lambda_bt)?
        }
        Method::SimSiam => {
            let xp = ctx.g.constant(batch.x_prime.clone());
            let za = arch.embed(&mut ctx, x)?;
            let zb = arch.embed(&mut ctx, xp)?;
            let pa = arch.predict(&mut ctx, za)?;
            let pb = arch.predict(&mut ctx, zb)?;
            objectives::simsiam(ctx.g, pa, zb, pb, za)?
        }
    };
    let (total, l_ca) = match phase {
        Phase::Warmup => (l_id, None),
        Phase::Joint => {
            let xc = ctx.g.constant(batch.corrupted.clone());
            let taps = arch.encode(&mut ctx, xc)?;
            let logits = arch.decode(&mut ctx, &taps)?;
            let recon = ctx.g.sigmoid(logits);
            let target = ctx.g.constant(batch.s_c.clone());
            let l_ca = objectives::reconstruction_l2(ctx.g, target, recon)?;
            (objectives::combined(ctx.g, l_ca, l_id, cfg.lambda_ca)?, Some(l_ca))
        }
    };
    let bindings = ctx.bindings();
    let l_id_v = g.value(l_id).item();
    let l_ca_v = l_ca.map(|v| g.value(v).item());
    Ok(Forward {
        g,
        bindings,
        total,
        l_id: l_id_v,
        l_ca: l_ca_v,
        keys,
    })
}

fn pair_seed(base: u64, epoch: usize, index: usize) -> u64 {
    rng::derive_index(rng::derive_index(base, epoch as u64), index as u64)
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: Model,
    opt: Box<dyn Optimizer + Send>,
    queue: Option<Queue>,
    exec: Exec,
    fill: f32,
}

impl Trainer<'_> {
    fn pairs(&self, samples: &[&ImageSample], seed_of: impl Fn(usize) -> u64 + Sync + Send) -> Result<Batch> {
        let pairs = make_pairs(self.exec, samples, &self.cfg.augment, self.fill, seed_of)?;
        Ok(Batch::new(&pairs))
    }

    /// Fills the key queue with momentum-encoder keys of randomly drawn
    /// training images so the first step already sees N negatives.
    fn prewarm(&mut self, train: &Dataset) -> Result<()> {
        let Some(capacity) = self.queue.as_ref().map(Queue::capacity) else {
            return Ok(());
        };
        let b = self.cfg.batch_size;
        let mut pick = SplitMix64::stream(self.cfg.seeds.data, "prewarm");
        let base = rng::derive(self.cfg.seeds.augment, "prewarm");
        for j in 0..capacity / b {
            let idx: Vec<usize> = (0..b).map(|_| pick.below(train.len() as u64) as usize).collect();
            let samples: Vec<&ImageSample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let batch = self.pairs(&samples, |i| pair_seed(base, j, i))?;
            let keys = momentum_keys(&mut self.model, &batch.x_prime, true, self.exec)?;
            self.queue.as_mut().unwrap().push(keys.data())?;
        }
        Ok(())
    }

    fn step(&mut self, batch: &Batch, phase: Phase, lr: f64) -> Result<(f32, f32, Option<f32>)> {
        let mut f = forward(&mut self.model, self.cfg, batch, phase, self.queue.as_ref(), true, self.exec)?;
        let loss = f.g.value(f.total).item();
        if !loss.is_finite() {
            return Err(TrainError::Diverged(loss));
        }
        f.g.backward(f.total)?;
        let grads = collect_grads(&mut f.g, &f.bindings);
        self.opt.step(&mut self.model.online, &grads, lr as f32)?;
        if let (Some(xi), Some(q), Some(keys)) = (self.model.momentum.as_mut(), self.queue.as_mut(), f.keys.as_ref()) {
            ema_update(&self.model.online, xi, self.cfg.ema_momentum as f32)?;
            q.push(keys.data())?;
        }
        Ok((loss, f.l_id, f.l_ca))
    }

    /// Mean loss over fixed validation batches, eval mode, no updates.
    fn validate(&mut self, batches: &[(Batch, usize)], phase: Phase) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for (batch, size) in batches {
            let f = forward(&mut self.model, self.cfg, batch, phase, self.queue.as_ref(), false, self.exec)?;
            sum += f64::from(f.g.value(f.total).item()) * *size as f64;
            n += size;
        }
        Ok(sum / n as f64)
    }
}

/// Runs warm-up then joint training on a 90/10 split of `data` and returns
/// the best (lowest validation loss) and last checkpoints.
///
/// When `epochs_joint > 0` the best checkpoint is chosen among joint-phase
/// epochs, whose validation loss includes the reconstruction term.
pub fn pretrain(cfg: &RunConfig, data: &Dataset) -> Result<PretrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (train, val) = data.split(1.0 - cfg.val_fraction, cfg.seeds.data);
    let b = cfg.batch_size;
    if b > train.len() {
        return Err(TrainError::BatchTooLarge { batch: b, train: train.len() });
    }
    if val.len() < 2 {
        return Err(TrainError::ValidationTooSmall(val.len()));
    }
    let exec = Exec::current();
    let steps_per_epoch = train.len() / b;
    let total_steps = steps_per_epoch * cfg.total_epochs();
    let mut schedule = cfg.schedule.build(cfg.optimizer.lr(), total_steps)?;
    let model = Model::build(cfg.method, &cfg.encoder, cfg.seeds.init)?;
    let queue = cfg
        .method
        .uses_momentum()
        .then(|| Queue::new(cfg.queue_size, PROJ_DIM, b))
        .transpose()?;
    let mut tr = Trainer {
        cfg,
        model,
        opt: cfg.optimizer.build(),
        queue,
        exec,
        fill: train.mean_pixel(),
    };
    tr.prewarm(&train)?;

    let val_base = rng::derive(cfg.seeds.augment, "val");
    let val_samples: Vec<&ImageSample> = val.samples.iter().collect();
    let mut val_batches = Vec::new();
    for (c, chunk) in val_samples.chunks(b).enumerate() {
        if chunk.len() >= 2 {
            val_batches.push((tr.pairs(chunk, |i| pair_seed(val_base, 0, c * b + i))?, chunk.len()));
        }
    }

    let hash = cfg.hash();
    let order_base = rng::derive(cfg.seeds.data, "order");
    let pair_base = rng::derive(cfg.seeds.augment, "pairs");
    let mut steps = Vec::with_capacity(total_steps);
    let mut metrics = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut t = 0;
    for epoch in 0..cfg.total_epochs() {
        let phase = if epoch < cfg.epochs_warmup { Phase::Warmup } else { Phase::Joint };
        let order = SplitMix64::new(rng::derive_index(order_base, epoch as u64)).permutation(train.len());
        let mut loss_sum = 0.0;
        let mut lr = schedule.lr(t);
        for s in 0..steps_per_epoch {
            let idx = &order[s * b..(s + 1) * b];
            let samples: Vec<&ImageSample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let batch = tr.pairs(&samples, |i| pair_seed(pair_base, epoch, idx[i]))?;
            lr = schedule.lr(t);
            let (loss, l_id, l_ca) = tr.step(&batch, phase, lr)?;
            loss_sum += f64::from(loss);
            steps.push(StepRecord {
                epoch: epoch + 1,
                phase,
                l_id,
                l_ca,
                loss,
                lr,
            });
            t += 1;
        }
        let val_loss = tr.validate(&val_batches, phase)?;
        schedule.observe(val_loss);
        let m = EpochMetrics {
            epoch: epoch + 1,
            phase,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_loss,
            lr,
        };
        log::info!(
            "epoch {} ({}) train {:.5} val {:.5} lr {:.5}",
            m.epoch,
            m.phase,
            m.train_loss,
            m.val_loss,
            m.lr
        );
        metrics.push(m);
        let eligible = cfg.epochs_joint == 0 || phase == Phase::Joint;
        if eligible && best.as_ref().is_none_or(|c| (val_loss as f32) < c.val_loss) {
            best = Some(Checkpoint::from_model(&tr.model, (epoch + 1) as u32, val_loss as f32, hash));
        }
    }
    let last_val = metrics.last().map_or(f64::NAN, |m| m.val_loss);
    let mut last = Checkpoint::from_model(&tr.model, cfg.total_epochs() as u32, last_val as f32, hash);
    let mut best = best.expect("at least one eligible epoch");
    if cfg.epochs_joint == 0 {
        // the decoder never trained; leave it out so downstream runs start it fresh
        best = best.without_prefix("decoder.");
        last = last.without_prefix("decoder.");
    }
    Ok(PretrainOutput {
        best,
        last,
        metrics,
        steps,
        model: tr.model,
        queue: tr.queue,
    })
}
