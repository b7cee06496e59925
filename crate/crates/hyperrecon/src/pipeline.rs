//! Data loading and training runs shared by the CLI and the service.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hyperrecon_core::checkpoint::{Checkpoint, RunContext};
use hyperrecon_core::data::{DataConfig, SplitImages};
use hyperrecon_core::forward::{ForwardModel, TaskConfig};
use hyperrecon_core::losses::ScalingFactors;
use hyperrecon_core::training::{calibrate_scaling, Dataset, EpochLog, Trainer};

use crate::config::RunConfig;
use crate::io;

/// Noise seeds of the train, validation and test observations, offset by
/// the data seed.
pub const NOISE_SEEDS: [u64; 3] = [11, 12, 13];

pub const CHECKPOINT_FILE: &str = "checkpoint.hrc";
pub const LOG_FILE: &str = "train.ndjson";
pub const SCALING_FILE: &str = "scaling.json";

pub fn load_images(data: &DataConfig) -> Result<SplitImages> {
    match &data.import_dir {
        Some(dir) => Ok(data.split_pool(io::import_images(Path::new(dir), data.size)?)?),
        None => Ok(data.generate()?),
    }
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub forward: ForwardModel,
    pub train: Dataset<f32>,
    pub val: Dataset<f32>,
    pub test: Dataset<f32>,
}

pub fn build_datasets(task: &TaskConfig, data: &DataConfig) -> Result<Datasets> {
    let images = load_images(data)?;
    let forward = task.build(data.size, data.size)?;
    let seed = |i: usize| data.seed.wrapping_add(NOISE_SEEDS[i]);
    Ok(Datasets {
        train: Dataset::simulate(&images.train, &forward, seed(0))?,
        val: Dataset::simulate(&images.val, &forward, seed(1))?,
        test: Dataset::simulate(&images.test, &forward, seed(2))?,
        forward,
    })
}

/// Test observations a checkpoint was trained against, truncated to
/// `limit` images.
pub fn checkpoint_test_set(ckpt: &Checkpoint, limit: Option<usize>) -> Result<Dataset<f32>> {
    let ctx = &ckpt.meta.context;
    let data = ctx.data.clone().context("checkpoint does not record its data recipe")?;
    let mut test = build_datasets(&ctx.task, &data)?.test;
    if let Some(n) = limit {
        test.samples.truncate(n);
    }
    if test.is_empty() {
        bail!("test set is empty");
    }
    Ok(test)
}

pub fn run_context(cfg: &RunConfig, scaling: Option<ScalingFactors>) -> RunContext {
    RunContext {
        task: cfg.task.clone(),
        image_size: [cfg.data.size, cfg.data.size],
        data: Some(cfg.data.clone()),
        scaling,
    }
}

fn scaling_of(cfg: &RunConfig) -> Result<Option<ScalingFactors>> {
    cfg.scaling_file.as_deref().map(io::read_json).transpose()
}

/// What `train` and `train-baseline` produce.
pub struct TrainRun {
    pub trainer: Trainer<f32>,
    pub checkpoint: PathBuf,
}

/// Trains (or resumes) a hypernetwork, or a baseline when `baseline` is set,
/// writing the checkpoint and an NDJSON epoch log after every epoch. A
/// resumed run keeps the checkpoint's model, loss and data context; `data`
/// must be built from that context.
pub fn train_run(
    cfg: &RunConfig,
    data: &Datasets,
    baseline: bool,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainRun> {
    let mut context = run_context(cfg, scaling_of(cfg)?);
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = io::load_checkpoint(p)?;
            context = ckpt.meta.context.clone();
            let mut t = ckpt.to_trainer()?;
            // only the epoch budget may change on resume
            t.config.epochs = cfg.train.epochs;
            t
        }
        None if baseline => {
            Trainer::baseline(&cfg.main_config(), &cfg.baseline_lambda, cfg.loss_spec()?, cfg.train.clone())?
        }
        None => Trainer::hyper(&cfg.main_config(), &cfg.hyper_config(), cfg.loss_spec()?, cfg.train.clone())?,
    };
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let log = cfg.out.join(LOG_FILE);
    let start = trainer.epoch;
    while trainer.epoch < trainer.config.epochs {
        let entry = trainer.run_epoch(&data.train, &data.val)?.clone();
        io::append_ndjson(&log, &entry)?;
        io::save_checkpoint(&checkpoint, &Checkpoint::from_trainer(&trainer, context.clone()))?;
        on_epoch(&entry);
    }
    if trainer.epoch == start {
        io::save_checkpoint(&checkpoint, &Checkpoint::from_trainer(&trainer, context))?;
    }
    Ok(TrainRun { trainer, checkpoint })
}

/// Trains the two single-term baselines and writes `scaling.json`.
pub fn calibrate(cfg: &RunConfig, data: &Datasets) -> Result<(ScalingFactors, PathBuf)> {
    let cal = calibrate_scaling(&cfg.main_config(), &cfg.loss_spec()?, cfg.train.clone(), &data.train, &data.val)?;
    let path = cfg.out.join(SCALING_FILE);
    io::write_json(&path, &cal.scaling)?;
    Ok((cal.scaling, path))
}
