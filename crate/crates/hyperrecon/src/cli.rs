//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hyperrecon_core::data::gen_phantoms;
use hyperrecon_core::evaluation::{self, diverse_pair, landscape, metric_curve, Metric};
use hyperrecon_core::training::Model;

use crate::config::{Overrides, RunConfig};
use crate::io;
use crate::pipeline::{build_datasets, calibrate, checkpoint_test_set, train_run};
use crate::serve::{bind_addr, serve, ServeState};

#[derive(Debug, Parser)]
#[command(name = "hyperrecon", version, about = "Hypernetwork-conditioned image reconstruction")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a hypernetwork over the loss-weight simplex.
    Train {
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a plain network at one fixed lambda.
    TrainBaseline {
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
    },
    /// Fit per-term scaling factors from single-term baselines.
    Calibrate,
    /// Metrics of a checkpoint on its test set at one lambda.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Also write every reconstruction as PNG.
        #[arg(long)]
        save_images: bool,
    },
    /// A metric along the lambda axis of a two-term model.
    Curve {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "psnr")]
        metric: String,
        #[arg(long, default_value_t = 21)]
        n: usize,
    },
    /// A metric over the lambda square of a three-term model.
    Landscape {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "rpsnr")]
        metric: String,
        #[arg(long, default_value_t = 21)]
        n: usize,
    },
    /// Two good, maximally different reconstructions of one test image.
    Diverse {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, default_value_t = 90.0)]
        percentile: f64,
        #[arg(long, default_value_t = 11)]
        n: usize,
    },
    /// HTTP service for interactive exploration.
    Serve {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Write seeded phantoms as PNGs plus a full-precision sidecar.
    GenData {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct CheckpointArgs {
    /// Defaults to `<out>/checkpoint.hrc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use only the first N test images.
    #[arg(long)]
    pub limit: Option<usize>,
}

impl CheckpointArgs {
    fn path(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| cfg.out.join(crate::pipeline::CHECKPOINT_FILE))
    }
}

fn print_epoch(e: &hyperrecon_core::training::EpochLog) {
    eprintln!("epoch {:>4}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val.loss);
}

fn default_lambda(model: &Model<f32>) -> Vec<f64> {
    match model {
        Model::Baseline(b) => b.lambda.clone(),
        Model::Hyper(h) => vec![0.5; h.config.lambda_dim],
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(&cli.overrides)?;
    match cli.command {
        Command::Train { resume } => {
            let data = match &resume {
                Some(p) => {
                    let ckpt = io::load_checkpoint(p)?;
                    let ctx = &ckpt.meta.context;
                    build_datasets(&ctx.task, ctx.data.as_ref().context("checkpoint has no data recipe")?)?
                }
                None => build_datasets(&cfg.task, &cfg.data)?,
            };
            let r = train_run(&cfg, &data, false, resume.as_deref(), print_epoch)?;
            println!("{}", r.checkpoint.display());
        }
        Command::TrainBaseline { lambda } => {
            if let Some(l) = lambda {
                cfg.baseline_lambda = l;
                cfg.validate()?;
            }
            let data = build_datasets(&cfg.task, &cfg.data)?;
            let r = train_run(&cfg, &data, true, None, print_epoch)?;
            println!("{}", r.checkpoint.display());
        }
        Command::Calibrate => {
            let data = build_datasets(&cfg.task, &cfg.data)?;
            let (s, path) = calibrate(&cfg, &data)?;
            println!("best-case losses {:?}, alphas {:?}", s.best_losses, s.alphas());
            println!("{}", path.display());
        }
        Command::Eval { ckpt, lambda, save_images } => {
            let c = io::load_checkpoint(&ckpt.path(&cfg))?;
            let model = c.model()?;
            let test = checkpoint_test_set(&c, ckpt.limit)?;
            let lambda = lambda.unwrap_or_else(|| default_lambda(&model));
            let report = evaluation::evaluate(&model, &lambda, &test)?;
            io::write_json(&cfg.out.join("eval.json"), &report)?;
            if save_images {
                let lt: Vec<f32> = lambda.iter().map(|&v| v as f32).collect();
                for (i, s) in test.samples.iter().enumerate() {
                    io::write_png(&cfg.out.join(format!("eval/recon_{i:04}.png")), &model.reconstruct(&lt, &s.input)?)?;
                }
            }
            let m = report.mean;
            println!(
                "lambda {:?}: psnr {:.3}  rpsnr {:.3}  ssim {:.4}  mae {:.5}  hfen {:.4}",
                lambda, m.psnr, m.rpsnr, m.ssim, -m.nmae, -m.nhfen
            );
        }
        Command::Curve { ckpt, metric, n } => {
            let c = io::load_checkpoint(&ckpt.path(&cfg))?;
            let test = checkpoint_test_set(&c, ckpt.limit)?;
            let curve = metric_curve(&c.model()?, &test, Metric::parse(&metric)?, n)?;
            io::write_json(&cfg.out.join("curve.json"), &curve)?;
            io::write_atomic(&cfg.out.join("curve.csv"), io::curve_csv(&curve).as_bytes())?;
            print!("{}", io::curve_csv(&curve));
        }
        Command::Landscape { ckpt, metric, n } => {
            let c = io::load_checkpoint(&ckpt.path(&cfg))?;
            let model = c.model()?;
            if model.lambda_dim() != 2 {
                bail!("landscape needs a three-term (K=3) model; this checkpoint has K={}", model.lambda_dim() + 1);
            }
            let test = checkpoint_test_set(&c, ckpt.limit)?;
            let l = landscape(&model, &test, Metric::parse(&metric)?, n)?;
            io::write_json(&cfg.out.join("landscape.json"), &l)?;
            io::write_atomic(&cfg.out.join("landscape.csv"), io::landscape_csv(&l).as_bytes())?;
            let [r, col] = l.argmax;
            println!("argmax lambda {:?}: {} {:.4}", l.argmax_lambda(), l.metric.name(), l.values[r][col]);
        }
        Command::Diverse { ckpt, image, percentile, n } => {
            let c = io::load_checkpoint(&ckpt.path(&cfg))?;
            let test = checkpoint_test_set(&c, ckpt.limit)?;
            let sample = test.samples.get(image).with_context(|| format!("no test image {image}"))?;
            let d = diverse_pair(&c.model()?, &test.forward, sample, n, percentile)?;
            io::write_png(&cfg.out.join(format!("diverse_{image}_a.png")), &d.image_a)?;
            io::write_png(&cfg.out.join(format!("diverse_{image}_b.png")), &d.image_b)?;
            println!(
                "lambda_a {:?} ({:.3})  lambda_b {:?} ({:.3})  distance {:.4}",
                d.lambda_a, d.score_a, d.lambda_b, d.score_b, d.distance
            );
        }
        Command::Serve { ckpt } => {
            let c = io::load_checkpoint(&ckpt.path(&cfg))?;
            let state = Arc::new(ServeState::from_checkpoint(&c, ckpt.limit)?);
            let addr = bind_addr()?;
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
        }
        Command::GenData { count, size } => {
            let seed = cli.overrides.seed.unwrap_or(cfg.data.seed);
            let size = size.unwrap_or(cfg.data.size);
            let written = gen_data(&cfg.out, count, size, seed)?;
            println!("{} phantoms in {}", written, cfg.out.display());
        }
    }
    Ok(())
}

/// Writes `phantom_NNNN.png` files and `phantoms.rec` with exact values.
pub fn gen_data(dir: &Path, count: usize, size: usize, seed: u64) -> Result<usize> {
    let ph = gen_phantoms(count, size, seed)?;
    let images: Vec<_> = ph.iter().map(|p| p.image.cast::<f32>()).collect();
    let names: Vec<String> = (0..count).map(|i| format!("phantom_{i:04}")).collect();
    for (n, img) in names.iter().zip(&images) {
        io::write_png(&dir.join(format!("{n}.png")), img)?;
    }
    let records: Vec<(&str, _)> = names.iter().map(String::as_str).zip(&images).collect();
    io::write_raw(&dir.join("phantoms.rec"), &records)?;
    Ok(count)
}
