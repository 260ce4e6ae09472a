use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use caid::analysis::{cka_reuse_table, distance_gain, pairwise_distances, write_cka_csv, write_kde_csv};
use caid::data::{generate_synthetic, load_dataset_dir, write_dataset, Dataset, Image};
use caid::nn::{extract_features, Method, Model};
use caid::par::{self, Exec};
use caid::train::{pretrain as run_pretrain, write_metrics_csv, Checkpoint, Seeds};
use caid::transfer::{
    finetune_with_model, read_eval_csv, write_eval_csv, write_significance_csv, EvalResult, Init, TaskKind,
};

use crate::manifest::ExperimentManifest;
use crate::{AnalyzeArgs, Common, FinetuneArgs, GenDataArgs, Mode, PretrainArgs, TaskArg};

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, manifest or input paths (exit 2).
    Usage(anyhow::Error),
    /// Anything that fails after the inputs were accepted (exit 1).
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Result<T> = std::result::Result<T, Failure>;

trait UsageExt<T> {
    fn usage(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for std::result::Result<T, E> {
    fn usage(self) -> Result<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

fn load_manifest(common: &Common) -> Result<ExperimentManifest> {
    ExperimentManifest::load(common.config.as_deref()).usage()
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", path.display())))
    }
}

fn load_data(m: &ExperimentManifest, dir: Option<&Path>) -> Result<Dataset> {
    let dir = dir.map_or_else(|| m.layout.resolve(&m.layout.data), Path::to_path_buf);
    existing(&dir, "dataset")?;
    load_dataset_dir(&dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .usage()
}

fn out_dir(common: &Common, m: &ExperimentManifest, default: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| m.layout.resolve(default))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let m = load_manifest(&a.common)?;
    let seed = a.seed.unwrap_or(m.seed);
    let out = out_dir(&a.common, &m, &m.layout.data);
    prepare_out(&out, a.common.force)?;
    let ds = generate_synthetic(&m.data, seed)?;
    let files = write_dataset(&ds, &out)?;
    println!("wrote {} images ({} files) to {}", ds.len(), files.len(), out.display());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let m = load_manifest(&a.common)?;
    let mut cfg = m.pretrain.clone();
    if let Some(method) = a.method {
        cfg.method = method;
    }
    if let Some(l) = a.lambda_ca {
        cfg.lambda_ca = l;
    }
    if let Some(e) = a.epochs_warmup {
        cfg.epochs_warmup = e;
    }
    if let Some(e) = a.epochs_joint {
        cfg.epochs_joint = e;
    }
    if let Some(s) = a.seed {
        cfg.seeds = Seeds::all(s);
    }
    cfg.validate().usage()?;
    let data = load_data(&m, a.data.as_deref())?;
    let out = out_dir(&a.common, &m, &m.layout.pretrain);
    prepare_out(&out, a.common.force)?;

    let res = run_pretrain(&cfg, &data)?;
    res.best.save(&out.join("best.ckpt"))?;
    res.last.save(&out.join("last.ckpt"))?;
    let mut w = create(&out.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &res.metrics)?;
    w.flush()?;
    let mut steps = csv::Writer::from_writer(create(&out.join("steps.csv"))?);
    steps.write_record(["step", "epoch", "phase", "l_id", "l_ca", "loss", "lr"])?;
    for (i, s) in res.steps.iter().enumerate() {
        steps.write_record([
            (i + 1).to_string(),
            s.epoch.to_string(),
            s.phase.to_string(),
            s.l_id.to_string(),
            s.l_ca.map(|v| v.to_string()).unwrap_or_default(),
            s.loss.to_string(),
            s.lr.to_string(),
        ])?;
    }
    steps.flush()?;
    let json = serde_json::to_string_pretty(&cfg)?;
    fs::write(out.join("config.json"), json + "\n")?;
    println!(
        "{} epochs, best epoch {} (val loss {}), outputs in {}",
        res.metrics.len(),
        res.best.epoch,
        res.best.val_loss,
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    existing(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let m = load_manifest(&a.common)?;
    let kind = match a.task {
        TaskArg::Classification => TaskKind::Classification,
        TaskArg::Segmentation => TaskKind::Segmentation,
    };
    let mut task = m.task(kind).clone();
    if let Some(f) = a.fraction {
        task.label_fraction = f;
    }
    if let Some(e) = a.epochs {
        task.epochs = e;
    }
    task.validate().usage()?;
    if a.seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed".into()));
    }
    let ckpt = match a.init.as_str() {
        "random" => None,
        p => Some(load_checkpoint(Path::new(p))?),
    };
    let arm = a.arm.clone().unwrap_or_else(|| match &ckpt {
        None => "random".into(),
        Some(_) => Path::new(&a.init)
            .file_stem()
            .map_or_else(|| "pretrained".into(), |s| s.to_string_lossy().into_owned()),
    });
    let data = load_data(&m, a.data.as_deref())?;
    let out = out_dir(&a.common, &m, &m.layout.finetune);
    prepare_out(&out, a.common.force)?;

    let init = ckpt.as_ref().map_or(Init::Random, Init::Pretrained);
    let (train, test) = data.split(1.0 - task.test_fraction, task.split_seed);
    let runs = par::map(Exec::current(), &a.seeds, |&s| finetune_with_model(init, &task, &train, &test, s));
    let mut details = csv::Writer::from_writer(create(&out.join("runs.csv"))?);
    details.write_record(["arm", "seed", "metric", "value", "best_val_loss", "best_epoch", "epochs_run", "skipped_classes"])?;
    let mut result = EvalResult {
        arm: arm.clone(),
        metric: kind.metric_name().into(),
        runs: Vec::new(),
    };
    for run in runs {
        let (o, model) = run?;
        Checkpoint::from_model(&model, o.best_epoch as u32, o.best_val_loss as f32, task.hash())
            .save(&out.join(format!("model_seed{}.ckpt", o.seed)))?;
        let skipped: Vec<String> = o.skipped_classes.iter().map(|c| c.to_string()).collect();
        details.write_record([
            arm.clone(),
            o.seed.to_string(),
            result.metric.clone(),
            o.metric.to_string(),
            o.best_val_loss.to_string(),
            o.best_epoch.to_string(),
            o.epochs_run.to_string(),
            skipped.join(";"),
        ])?;
        println!("{arm} seed {}: {} = {:.4}", o.seed, result.metric, o.metric);
        result.runs.push((o.seed, o.metric));
    }
    details.flush()?;
    let mut w = create(&out.join("results.csv"))?;
    write_eval_csv(&mut w, std::slice::from_ref(&result))?;
    w.flush()?;
    println!("{arm}: mean {} {:.4} ± {:.4}", result.metric, result.mean(), result.std());
    Ok(())
}

/// A downstream-style model whose encoder comes from `ckpt`.
fn encoder_from(ckpt: &Checkpoint, m: &ExperimentManifest) -> Result<Model> {
    let mut model = Model::build(Method::MocoV2, &m.pretrain.encoder, 0).usage()?;
    model.momentum = None;
    ckpt.load_into(&mut model.online, &["encoder."])
        .context("checkpoint does not match the manifest's encoder")
        .usage()?;
    Ok(model)
}

fn probes(data: &Dataset, limit: Option<usize>) -> Vec<&Image> {
    let n = limit.unwrap_or(data.len()).min(data.len());
    data.samples[..n].iter().map(|s| &s.image).collect()
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let m = load_manifest(&a.common)?;
    if a.inputs.len() != 2 {
        return Err(usage(format!("--inputs needs exactly two paths, got {}", a.inputs.len())));
    }
    for p in &a.inputs {
        existing(p, "input")?;
    }
    let out = out_dir(&a.common, &m, &m.layout.analysis);
    match a.mode {
        Mode::Distances => {
            if a.labels.len() != 2 {
                return Err(usage("--labels needs two names".into()));
            }
            if !(1..=5).contains(&a.layer) {
                return Err(usage(format!("--layer must be 1-5, got {}", a.layer)));
            }
            let models = [
                encoder_from(&load_checkpoint(&a.inputs[0])?, &m)?,
                encoder_from(&load_checkpoint(&a.inputs[1])?, &m)?,
            ];
            let data = load_data(&m, a.data.as_deref())?;
            prepare_out(&out, a.common.force)?;
            let imgs = probes(&data, a.limit);
            let mut reports = Vec::new();
            for model in &models {
                let f = extract_features(model, &imgs, a.layer)?;
                reports.push(pairwise_distances(&f)?);
            }
            let curves = [reports[0].kde()?, reports[1].kde()?];
            let mut w = create(&out.join("kde.csv"))?;
            write_kde_csv(&mut w, &[(a.labels[0].as_str(), &curves[0]), (a.labels[1].as_str(), &curves[1])])?;
            w.flush()?;
            let gain = distance_gain(&reports[0], &reports[1])?;
            let mut s = csv::Writer::from_writer(create(&out.join("distance_summary.csv"))?);
            s.write_record(["label", "mean_distance", "bandwidth", "pairs"])?;
            for ((label, r), c) in a.labels.iter().zip(&reports).zip(&curves) {
                s.write_record([
                    label.clone(),
                    r.mean.to_string(),
                    c.bandwidth.to_string(),
                    r.distances.len().to_string(),
                ])?;
            }
            s.flush()?;
            let mut g = csv::Writer::from_writer(create(&out.join("distance_gain.csv"))?);
            g.write_record(["caid", "baseline", "distance_gain"])?;
            g.write_record([a.labels[0].clone(), a.labels[1].clone(), gain.to_string()])?;
            g.flush()?;
            println!("mean distance {} {:.4} vs {} {:.4}; gain {:.4}", a.labels[0], reports[0].mean, a.labels[1], reports[1].mean, gain);
        }
        Mode::Cka => {
            let before = encoder_from(&load_checkpoint(&a.inputs[0])?, &m)?;
            let after = encoder_from(&load_checkpoint(&a.inputs[1])?, &m)?;
            let data = load_data(&m, a.data.as_deref())?;
            prepare_out(&out, a.common.force)?;
            let rows = cka_reuse_table(&before, &after, &probes(&data, a.limit))?;
            let mut w = create(&out.join("cka.csv"))?;
            write_cka_csv(&mut w, &rows)?;
            w.flush()?;
            for r in &rows {
                println!("layer {}: cka {:.4}", r.layer, r.cka);
            }
        }
        Mode::Ttest => {
            let read = |p: &Path| -> Result<EvalResult> {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                read_eval_csv(f)
                    .with_context(|| format!("reading {}", p.display()))
                    .usage()?
                    .into_iter()
                    .next()
                    .ok_or_else(|| usage(format!("{} holds no results", p.display())))
            };
            let (x, y) = (read(&a.inputs[0])?, read(&a.inputs[1])?);
            prepare_out(&out, a.common.force)?;
            let t = x.ttest(&y)?;
            let mut w = create(&out.join("ttest.csv"))?;
            write_significance_csv(&mut w, &[(x.arm.clone(), y.arm.clone(), t)])?;
            w.flush()?;
            println!("{} vs {}: t = {:.4}, p = {:.4}", x.arm, y.arm, t.t, t.p);
        }
    }
    Ok(())
}
