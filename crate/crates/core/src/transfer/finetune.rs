use super::augment::{classification_view, segmentation_view};
use super::metrics::{dice, mean_auc};
use super::{DownstreamTask, EvalResult, Result, TaskKind, TransferError};
use crate::data::{Dataset, Image, ImageSample};
use crate::nn::{collect_grads, Ctx, Linear, Method, Model, ParamStore};
use crate::par::Exec;
use crate::rng::{self, SplitMix64};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{Checkpoint, LrSchedule};

/// Starting point of a fine-tuning run.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Random,
    Pretrained(&'a Checkpoint),
}

/// Outcome of one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    /// Mean AUC (classification) or mean Dice (segmentation) on the test split.
    pub metric: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Classes left out of the mean AUC because the test split has only one label value.
    pub skipped_classes: Vec<usize>,
}

/// A seeded uniform sample of `floor(fraction·n)` items without replacement;
/// `fraction == 1` returns the dataset unchanged.
pub fn subset_labels(ds: &Dataset, fraction: f64, seed: u64, batch_size: usize) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TransferError::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let n = (ds.len() as f64 * fraction).floor() as usize;
    if n < batch_size {
        return Err(TransferError::SubsetTooSmall { size: n, batch: batch_size });
    }
    let perm = SplitMix64::stream(seed, "subset").permutation(ds.len());
    Ok(ds.select(&perm[..n]))
}

/// Splits off the validation tenth (at least 2 images) used for early stopping.
fn split_validation(ds: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let n_val = ((ds.len() as f64 * 0.1).ceil() as usize).max(2);
    let perm = SplitMix64::stream(seed, "val").permutation(ds.len());
    (ds.select(&perm[n_val..]), ds.select(&perm[..n_val]))
}

/// Downstream network: the encoder (and decoder) of a fresh model, loaded
/// from the checkpoint when given, plus a new linear classifier for
/// classification. Pretrained projector and predictor heads are dropped.
pub fn build_downstream(
    init: Init<'_>,
    task: &DownstreamTask,
    classes: usize,
    seed: u64,
) -> Result<(Model, Option<Linear>)> {
    let mut model = Model::build(Method::MocoV2, &task.encoder, rng::derive(seed, "downstream"))?;
    model.momentum = None;
    if let Init::Pretrained(ckpt) = init {
        let has_decoder = ckpt.tensors.iter().any(|(n, _)| n.starts_with("decoder."));
        let mut prefixes = vec!["encoder."];
        if task.kind == TaskKind::Segmentation && has_decoder {
            prefixes.push("decoder.");
        }
        ckpt.load_into(&mut model.online, &prefixes)?;
    }
    let head = (task.kind == TaskKind::Classification).then(|| {
        let mut rng = SplitMix64::stream(seed, "classifier");
        Linear::new(&mut model.online, &mut rng, "classifier", task.encoder.feature_dim(), classes)
    });
    Ok((model, head))
}

fn labels_of(s: &ImageSample, classes: usize) -> Result<Vec<f32>> {
    let l = s.labels.as_ref().ok_or_else(|| TransferError::MissingLabels(s.id.clone()))?;
    if l.len() != classes {
        return Err(TransferError::MissingLabels(s.id.clone()));
    }
    Ok(l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

fn mask_of(s: &ImageSample) -> Result<&Image> {
    s.mask.as_ref().ok_or_else(|| TransferError::MissingMask(s.id.clone()))
}

struct Net {
    model: Model,
    head: Option<Linear>,
    kind: TaskKind,
}

impl Net {
    /// Logits: (N, classes) or (N, 1, H, W).
    fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let taps = self.model.arch.encode(ctx, x)?;
        Ok(match (&self.head, self.kind) {
            (Some(head), TaskKind::Classification) => {
                let h = self.model.arch.pool(ctx, &taps, 5)?;
                head.forward(ctx, h)?
            }
            _ => self.model.arch.decode(ctx, &taps)?,
        })
    }

    fn loss(&mut self, x: Tensor<f32>, y: Tensor<f32>, train: bool) -> Result<(Graph<f32>, Var, Vec<(crate::nn::ParamId, Var)>)> {
        let mut g = Graph::new();
        let mut store = std::mem::take(&mut self.model.online);
        let res = (|| {
            let mut ctx = Ctx::new(&mut g, &mut store, train, train);
            let xv = ctx.g.constant(x);
            let logits = self.logits(&mut ctx, xv)?;
            let yv = ctx.g.constant(y);
            let loss = ctx.g.bce_with_logits(logits, yv)?;
            Ok::<_, TransferError>((loss, ctx.bindings()))
        })();
        self.model.online = store;
        let (loss, bindings) = res?;
        Ok((g, loss, bindings))
    }

    fn predict(&mut self, images: &[&Image]) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        let mut store = std::mem::take(&mut self.model.online);
        let res = (|| {
            for chunk in images.chunks(64) {
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&mut g, &mut store, false, false);
                let x = ctx.g.constant(Image::batch_tensor(chunk.iter().copied()));
                let l = self.logits(&mut ctx, x)?;
                out.extend(ctx.g.value(l).data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())));
            }
            Ok::<_, TransferError>(())
        })();
        self.model.online = store;
        res?;
        Ok(out)
    }
}

fn batch_tensors(
    samples: &[&ImageSample],
    kind: TaskKind,
    classes: usize,
    aug_seed: Option<u64>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys: Vec<f32> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let seed = aug_seed.map(|b| rng::derive_index(b, i as u64));
        match kind {
            TaskKind::Classification => {
                let img = match seed {
                    Some(sd) => classification_view(&s.image, sd, s.image.height() * 7 / 8, 10.0),
                    None => s.image.clone(),
                };
                xs.push(img);
                ys.extend(labels_of(s, classes)?);
            }
            TaskKind::Segmentation => {
                let mask = mask_of(s)?;
                let (img, m) = match seed {
                    Some(sd) => segmentation_view(&s.image, mask, sd),
                    None => (s.image.clone(), mask.clone()),
                };
                xs.push(img);
                ys.extend_from_slice(m.pixels());
            }
        }
    }
    let x = Image::batch_tensor(xs.iter());
    let y_shape = match kind {
        TaskKind::Classification => vec![samples.len(), classes],
        TaskKind::Segmentation => x.shape().to_vec(),
    };
    Ok((x, Tensor::new(y_shape, ys)?))
}

/// Fine-tunes every parameter on a label subset of `train` with early
/// stopping on validation loss, then scores the best model on `test`.
pub fn finetune(init: Init<'_>, task: &DownstreamTask, train: &Dataset, test: &Dataset, seed: u64) -> Result<RunOutcome> {
    finetune_with_model(init, task, train, test, seed).map(|(o, _)| o)
}

/// [`finetune`], also returning the selected model (classification runs
/// carry the `classifier` head in its online store).
pub fn finetune_with_model(
    init: Init<'_>,
    task: &DownstreamTask,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<(RunOutcome, Model)> {
    task.validate()?;
    let classes = train.classes.len();
    if task.kind == TaskKind::Classification && classes == 0 {
        return Err(TransferError::Config("classification needs class names".into()));
    }
    let subset = subset_labels(train, task.label_fraction, rng::derive(seed, "subset"), task.batch_size)?;
    let (tr, val) = split_validation(&subset, rng::derive(seed, "val"));
    let b = task.batch_size.min(tr.len());
    if b < 2 {
        return Err(TransferError::SubsetTooSmall { size: tr.len(), batch: task.batch_size });
    }
    let (model, head) = build_downstream(init, task, classes, seed)?;
    let mut net = Net {
        model,
        head,
        kind: task.kind,
    };
    let steps_per_epoch = tr.len() / b;
    let optimizer = task.optimizer();
    let mut opt = optimizer.build();
    let mut schedule: LrSchedule = task.schedule().build(optimizer.lr(), steps_per_epoch * task.epochs)?;
    let val_refs: Vec<&ImageSample> = val.samples.iter().collect();
    let (vx, vy) = batch_tensors(&val_refs, task.kind, classes, None)?;
    let order_base = rng::derive(seed, "order");
    let aug_base = rng::derive(seed, "augment");

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut t = 0;
    let mut epochs_run = 0;
    for epoch in 0..task.epochs {
        epochs_run = epoch + 1;
        let order = SplitMix64::new(rng::derive_index(order_base, epoch as u64)).permutation(tr.len());
        for s in 0..steps_per_epoch {
            let samples: Vec<&ImageSample> = order[s * b..(s + 1) * b].iter().map(|&i| &tr.samples[i]).collect();
            let aug = rng::derive_index(rng::derive_index(aug_base, epoch as u64), s as u64);
            let (x, y) = batch_tensors(&samples, task.kind, classes, Some(aug))?;
            let (mut g, loss, bindings) = net.loss(x, y, true)?;
            g.backward(loss)?;
            let grads = collect_grads(&mut g, &bindings);
            opt.step(&mut net.model.online, &grads, schedule.lr(t) as f32)?;
            t += 1;
        }
        let (g, loss, _) = net.loss(vx.clone(), vy.clone(), false)?;
        let val_loss = f64::from(g.value(loss).item());
        schedule.observe(val_loss);
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch + 1, net.model.online.clone()));
        } else if epoch + 1 - best.as_ref().unwrap().1 >= task.early_stop_patience {
            break;
        }
    }
    let (best_val_loss, best_epoch, store) = best.expect("at least one epoch");
    net.model.online = store;

    let test_refs: Vec<&Image> = test.samples.iter().map(|s| &s.image).collect();
    let probs = net.predict(&test_refs)?;
    let (metric, skipped_classes) = match task.kind {
        TaskKind::Classification => {
            let labels: Vec<bool> = test
                .samples
                .iter()
                .map(|s| labels_of(s, classes))
                .collect::<Result<Vec<_>>>()?
                .concat()
                .into_iter()
                .map(|v| v > 0.5)
                .collect();
            let scores: Vec<f64> = probs.iter().map(|&p| f64::from(p)).collect();
            mean_auc(&scores, &labels, classes)?
        }
        TaskKind::Segmentation => {
            let hw = test.samples.first().map_or(0, |s| s.image.pixels().len());
            let mut sum = 0.0;
            for (s, p) in test.samples.iter().zip(probs.chunks(hw.max(1))) {
                let pred: Vec<bool> = p.iter().map(|&v| v >= 0.5).collect();
                let truth: Vec<bool> = mask_of(s)?.pixels().iter().map(|&v| v >= 0.5).collect();
                sum += dice(&pred, &truth)?;
            }
            (sum / test.len().max(1) as f64, Vec::new())
        }
    };
    let outcome = RunOutcome {
        seed,
        metric,
        best_val_loss,
        best_epoch,
        epochs_run,
        skipped_classes,
    };
    Ok((outcome, net.model))
}

pub fn finetune_classification(
    init: Init<'_>,
    task: &DownstreamTask,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<RunOutcome> {
    if task.kind != TaskKind::Classification {
        return Err(TransferError::Config("task kind is not classification".into()));
    }
    finetune(init, task, train, test, seed)
}

pub fn finetune_segmentation(
    init: Init<'_>,
    task: &DownstreamTask,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<RunOutcome> {
    if task.kind != TaskKind::Segmentation {
        return Err(TransferError::Config("task kind is not segmentation".into()));
    }
    finetune(init, task, train, test, seed)
}

/// Splits `data` into train/test with the task's split seed, then runs one
/// fine-tuning per seed. Runs are independent and may execute in parallel.
pub fn run_arm(arm: &str, init: Init<'_>, task: &DownstreamTask, data: &Dataset, seeds: &[u64]) -> Result<EvalResult> {
    let (train, test) = data.split(1.0 - task.test_fraction, task.split_seed);
    let outcomes = crate::par::map(Exec::current(), seeds, |&s| finetune(init, task, &train, &test, s));
    let runs = outcomes
        .into_iter()
        .map(|o| o.map(|o| (o.seed, o.metric)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult {
        arm: arm.to_string(),
        metric: task.kind.metric_name().to_string(),
        runs,
    })
}
