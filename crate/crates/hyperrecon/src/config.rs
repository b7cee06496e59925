//! Run configuration: a JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use hyperrecon_core::data::DataConfig;
use hyperrecon_core::forward::{TaskConfig, TaskKind};
use hyperrecon_core::losses::{LossMode, LossSpec, ScalingFactors};
use hyperrecon_core::networks::{HyperNetConfig, MainNetConfig};
use hyperrecon_core::training::{Sampling, TrainConfig};
use serde::{Deserialize, Serialize};

/// Hypernetwork size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum HnetSize {
    S,
    M,
    L,
}

impl HnetSize {
    /// Embedding width `d`.
    pub fn width(self) -> usize {
        match self {
            HnetSize::S => 4,
            HnetSize::M => 32,
            HnetSize::L => 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub loss_mode: LossMode,
    /// Per-term scaling factors. Unset means unit factors for `sl` and the
    /// parameter/pixel-count defaults for `ao`.
    pub alphas: Option<Vec<f64>>,
    /// A `scaling.json` written by `calibrate`; takes precedence over `alphas`.
    pub scaling_file: Option<PathBuf>,
    pub hnet: HnetSize,
    /// `in_channels` is derived from the task and ignored here.
    pub main: MainNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Lambda of `train-baseline`.
    pub baseline_lambda: Vec<f64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            loss_mode: LossMode::Sl,
            alphas: None,
            scaling_file: None,
            hnet: HnetSize::M,
            main: MainNetConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            baseline_lambda: vec![0.5],
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed (`gen-data`: phantom seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub sampling: Option<SamplingArg>,
    #[arg(long, global = true)]
    pub dhs_keep: Option<usize>,
    #[arg(long, global = true)]
    pub hnet: Option<HnetSize>,
    #[arg(long, global = true)]
    pub task: Option<TaskArg>,
    #[arg(long, global = true)]
    pub loss_mode: Option<LossModeArg>,
    /// CS-MRI acceleration factor.
    #[arg(long, global = true)]
    pub accel: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Uhs,
    Dhs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Csmri,
    Denoise,
    Sr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossModeArg {
    Sl,
    Ao,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
    }

    /// Config file (or defaults) with flag overrides applied, validated.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(o);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(s) = o.sampling {
            self.train.sampling = match s {
                SamplingArg::Uhs => Sampling::Uhs,
                SamplingArg::Dhs => Sampling::Dhs,
            };
        }
        if let Some(b) = o.dhs_keep {
            self.train.dhs_keep = b;
        }
        if let Some(h) = o.hnet {
            self.hnet = h;
        }
        if let Some(t) = o.task {
            self.task.kind = match t {
                TaskArg::Csmri => TaskKind::Csmri,
                TaskArg::Denoise => TaskKind::Denoise,
                TaskArg::Sr => TaskKind::Sr,
            };
        }
        if let Some(m) = o.loss_mode {
            self.loss_mode = match m {
                LossModeArg::Sl => LossMode::Sl,
                LossModeArg::Ao => LossMode::Ao,
            };
        }
        if let Some(a) = o.accel {
            self.task.acceleration = a;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
    }

    /// Number of loss terms.
    pub fn arity(&self) -> usize {
        match self.loss_mode {
            LossMode::Sl => 2,
            LossMode::Ao => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.sampling == Sampling::Dhs && self.loss_mode != LossMode::Ao {
            bail!("invalid config: dhs sampling requires loss_mode ao");
        }
        if let Some(a) = &self.alphas {
            if a.len() != self.arity() {
                bail!("invalid config: alphas has {} entries, loss_mode needs {}", a.len(), self.arity());
            }
        }
        if self.baseline_lambda.len() != self.arity() - 1 {
            bail!(
                "invalid config: baseline_lambda has {} entries, loss_mode needs {}",
                self.baseline_lambda.len(),
                self.arity() - 1
            );
        }
        self.train.validate()?;
        self.main_config().validate()?;
        self.task.build(self.data.size, self.data.size)?;
        Ok(())
    }

    pub fn main_config(&self) -> MainNetConfig {
        let channels = if self.task.kind == TaskKind::Csmri { 2 } else { 1 };
        MainNetConfig { in_channels: channels, ..self.main.clone() }
    }

    pub fn hyper_config(&self) -> HyperNetConfig {
        HyperNetConfig { lambda_dim: self.arity() - 1, width: self.hnet.width() }
    }

    /// Loss with its scaling factors resolved. Reads `scaling_file` if set.
    pub fn loss_spec(&self) -> Result<LossSpec> {
        let alphas = match (&self.scaling_file, &self.alphas) {
            (Some(p), _) => {
                let s: ScalingFactors = crate::io::read_json(p)?;
                Some(s.alphas())
            }
            (None, a) => a.clone(),
        };
        let spec = match (self.loss_mode, alphas) {
            (LossMode::Sl, None) => LossSpec::supervised([1.0, 1.0]),
            (LossMode::Ao, None) => {
                let n = self.data.size * self.data.size;
                LossSpec::amortized_default(self.main_config().param_count()?, n)
            }
            (mode, Some(a)) => {
                let mut spec = match mode {
                    LossMode::Sl => LossSpec::supervised([1.0, 1.0]),
                    LossMode::Ao => LossSpec::amortized([1.0, 1.0, 1.0]),
                };
                if a.len() != spec.arity() {
                    bail!("scaling factors have {} entries, loss_mode needs {}", a.len(), spec.arity());
                }
                spec.alphas = a;
                spec
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}
