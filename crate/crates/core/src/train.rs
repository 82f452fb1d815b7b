//! The training step and the training loop.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use uvae_autograd::{set_parallel, Scalar};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{batch_at, write_ingestion_manifest, Batch, Prefetcher, UnpairedDataset};
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::objective::{total_loss, ObjectiveConfig};
use crate::optim::{Adam, OptimizerConfig};
use crate::preprocess::{prepare_domain_input, prepare_domains, write_sidecar, TaskConfig};
use crate::rng::{derived_rng, derived_u64};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub recon_clean: f64,
    pub recon_noisy: f64,
    pub kl_total: f64,
    pub kl_per_layer: Vec<f64>,
    pub anneal_weight: f64,
    pub lr: f64,
    pub total: f64,
}

/// Settings shared by every step of a run.
#[derive(Clone, Debug)]
pub struct StepConfig<'a> {
    pub task: &'a TaskConfig,
    pub objective: &'a ObjectiveConfig,
    pub optimizer: &'a OptimizerConfig,
    pub seed: u64,
}

/// Loss, backward pass and Adam update for iteration `iteration`.
///
/// On a non-finite loss or update the model and optimizer are left as they
/// were before the call.
///
/// The step's randomness comes from its own derived stream: clean-domain
/// pre-processing, then corrupted-domain pre-processing, then the
/// reparametrization noise.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &Batch,
    iteration: u64,
    cfg: &StepConfig<'_>,
) -> Result<MetricsRecord> {
    let mut rng = derived_rng(cfg.seed, "step", iteration);
    let x = prepare_domain_input(&batch.clean, &cfg.task.sigma_x, cfg.task.degradation_input, &mut rng)?;
    let y = prepare_domain_input(&batch.corrupted, &cfg.task.sigma_y, cfg.task.degradation_input, &mut rng)?;
    let lg = total_loss(model, &x, &y, iteration as i64, cfg.objective, &mut rng)?;
    if !lg.breakdown.total.is_finite() {
        return Err(CoreError::Numeric { stage: "loss", layer: 0 });
    }
    let grads = lg.gradients()?;
    let lr = cfg.optimizer.lr_at(iteration);
    let backup = (model.params().clone(), adam.clone());
    adam.update(model.params_mut(), &grads, cfg.optimizer, lr)?;
    if !model.params().all_finite() {
        *model.params_mut() = backup.0;
        *adam = backup.1;
        return Err(CoreError::Numeric { stage: "parameter update", layer: 0 });
    }
    let b = lg.breakdown;
    Ok(MetricsRecord {
        iteration,
        recon_clean: b.recon_clean,
        recon_noisy: b.recon_noisy,
        kl_total: b.kl_total(),
        kl_per_layer: b.kl_zn_per_layer,
        anneal_weight: b.anneal_weight,
        lr,
        total: b.total,
    })
}

/// Held-out loss, logged every `eval_every` iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub recon_clean: f64,
    pub recon_noisy: f64,
    pub kl_total: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Disables the multithreaded kernels so every floating point reduction
    /// happens in a fixed order.
    pub strict_determinism: bool,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub start_iteration: u64,
    pub final_checkpoint: PathBuf,
    pub last_record: Option<MetricsRecord>,
}

/// Output layout of a training run.
pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.jsonl")
}

pub fn eval_path(out_dir: &Path) -> PathBuf {
    out_dir.join("eval.jsonl")
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    checkpoint_dir(out_dir).join("final.ckpt")
}

pub fn last_good_checkpoint_path(out_dir: &Path) -> PathBuf {
    checkpoint_dir(out_dir).join("last_good.ckpt")
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CoreError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

fn append_line<S: Serialize>(file: &mut File, path: &Path, record: &S) -> Result<()> {
    let mut line = serde_json::to_string(record).map_err(|e| CoreError::Config(e.to_string()))?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| CoreError::io(path, e))
}

/// Drops log records at or after `start`, so a resumed run continues the log
/// of an uninterrupted one and a fresh run starts empty.
fn truncate_log(path: &Path, start: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(CoreError::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        if v["iteration"].as_u64().is_some_and(|it| it < start) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| CoreError::io(path, e))
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new().create(true).append(true).open(path).map_err(|e| CoreError::io(path, e))
}

/// Runs `config` to `optimizer.total_iters`, calling `progress` after every step.
///
/// Writes `metrics.jsonl` (one record per iteration; on resume, records from
/// the resume iteration on are replaced), `eval.jsonl`,
/// the ingestion manifest and operator sidecar, and checkpoints under
/// `checkpoints/`: `iter_XXXXXXXX.ckpt` every `checkpoint_every` steps and
/// `final.ckpt` at the end. A non-finite loss or update writes
/// `last_good.ckpt` with the state before the failing step and returns the
/// error.
pub fn run_training<T: Scalar>(
    config: &RunConfig,
    options: &TrainOptions,
    mut progress: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    set_parallel(!options.strict_determinism);
    let out = &options.out_dir;
    let ckpt_dir = checkpoint_dir(out);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| CoreError::io(&ckpt_dir, e))?;

    let (mut model, mut adam, start, seed) = match &options.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            ck.check_architecture(&config.model)?;
            (ck.model()?, ck.adam, ck.rng.next_iteration, ck.rng.seed)
        }
        None => {
            let m = Model::<T>::new(config.model.clone(), derived_u64(config.seed, "init", 0))?;
            let a = Adam::new(m.params());
            (m, a, 0, config.seed)
        }
    };

    let domains = prepare_domains(&config.data.clean, &config.data.corrupted, &config.task, config.data.crop, seed)?;
    write_ingestion_manifest(&out.join("ingestion.tsv"), &domains.ingestion)?;
    write_sidecar(&out.join("operators.jsonl"), &domains.sidecar)?;
    let normalization = domains.normalization.clone();
    let dataset = UnpairedDataset::new(
        domains.source,
        domains.target,
        config.data.crop,
        config.data.batch,
        config.model.divisor(),
    )?;
    if dataset.channels() != config.model.input_channels {
        return Err(CoreError::Config(format!(
            "data has {} channels, model.input_channels = {}",
            dataset.channels(),
            config.model.input_channels
        )));
    }
    let eval_batch = batch_at(&dataset, derived_u64(seed, "eval", 0), 0)?;
    let mut prefetch = Prefetcher::new(Arc::new(dataset), seed, start, config.data.workers, config.data.prefetch);

    let (mpath, epath) = (metrics_path(out), eval_path(out));
    truncate_log(&mpath, start)?;
    truncate_log(&epath, start)?;
    let mut metrics = open_append(&mpath)?;
    let mut evals = open_append(&epath)?;
    let step_cfg = StepConfig { task: &config.task, objective: &config.objective, optimizer: &config.optimizer, seed };
    let snapshot = |model: &Model<T>, adam: &Adam<T>, it: u64| {
        let mut c = Checkpoint::new(model, adam, it, config, normalization.clone());
        c.rng.seed = seed;
        c
    };

    let mut last_record = None;
    for it in start..config.optimizer.total_iters {
        let (_, batch) = prefetch.next_batch()?;
        let record = match train_step(&mut model, &mut adam, &batch, it, &step_cfg) {
            Ok(r) => r,
            Err(e @ CoreError::Numeric { .. }) => {
                snapshot(&model, &adam, it).save(&last_good_checkpoint_path(out))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        append_line(&mut metrics, &mpath, &record)?;
        progress(&record);
        last_record = Some(record);
        let done = it + 1;
        if done % config.eval_every == 0 {
            let mut rng = derived_rng(seed, "eval_step", 0);
            let x =
                prepare_domain_input(&eval_batch.clean, &config.task.sigma_x, config.task.degradation_input, &mut rng)?;
            let y = prepare_domain_input(
                &eval_batch.corrupted,
                &config.task.sigma_y,
                config.task.degradation_input,
                &mut rng,
            )?;
            let b = total_loss(&model, &x, &y, it as i64, &config.objective, &mut rng)?.breakdown;
            let rec = EvalRecord {
                iteration: it,
                recon_clean: b.recon_clean,
                recon_noisy: b.recon_noisy,
                kl_total: b.kl_total(),
                total: b.total,
            };
            append_line(&mut evals, &epath, &rec)?;
        }
        if done % config.checkpoint_every == 0 {
            snapshot(&model, &adam, done).save(&ckpt_dir.join(format!("iter_{done:08}.ckpt")))?;
        }
    }
    let final_path = final_checkpoint_path(out);
    snapshot(&model, &adam, config.optimizer.total_iters.max(start)).save(&final_path)?;
    Ok(TrainOutcome { start_iteration: start, final_checkpoint: final_path, last_record })
}
