//! Hypernetwork training with uniform or data-driven hyperparameter
//! sampling, fixed-lambda baselines, Adam, and scaling calibration.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, Measurement};
use crate::losses::{self, LossContext, LossMode, LossSpec, LossTerm, ScalingFactors};
use crate::networks::{
    input_magnitude, main_forward, theta_row, validate_lambda, HyperNet, HyperNetConfig, LayerVars, MainNetConfig,
    MainNetParams,
};
use crate::numerics::{ComplexPair, NdArray, Tape, Var};
use crate::scalar::Real;

/// One simulated observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// Ground truth `[H, W]`, when known.
    pub target: Option<NdArray<T>>,
    pub measurement: Measurement<T>,
    /// Zero-filled network input `[C, H, W]`.
    pub input: NdArray<T>,
}

impl<T: Real> Sample<T> {
    /// Zero-filled reconstruction as a real image (the residual base and
    /// the rPSNR reference).
    pub fn zero_filled(&self) -> Result<NdArray<T>> {
        input_magnitude(&self.input)
    }
}

fn cast_measurement<T: Real>(m: &Measurement<f64>) -> Measurement<T> {
    match m {
        Measurement::Image(a) => Measurement::Image(a.cast()),
        Measurement::KSpace(k) => Measurement::KSpace(ComplexPair { re: k.re.cast(), im: k.im.cast() }),
    }
}

/// Observations of a set of images through one forward model. Noise is
/// drawn once per sample when the dataset is built.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub forward: ForwardModel,
    pub samples: Vec<Sample<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn simulate(images: &[NdArray<f64>], forward: &ForwardModel, noise_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let samples = images
            .iter()
            .map(|x| {
                let y = forward.apply(x, &mut rng)?;
                let input = forward.zero_fill(&y)?;
                Ok(Sample { target: Some(x.cast()), measurement: cast_measurement(&y), input: input.cast() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { forward: forward.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A fixed-lambda network trained directly, without a hypernetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline<T> {
    pub params: MainNetParams<T>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Hyper(HyperNet<T>),
    Baseline(Baseline<T>),
}

impl<T: Real> Model<T> {
    pub fn main_config(&self) -> &MainNetConfig {
        match self {
            Model::Hyper(h) => &h.main,
            Model::Baseline(b) => &b.params.config,
        }
    }

    /// `K - 1`.
    pub fn lambda_dim(&self) -> usize {
        match self {
            Model::Hyper(h) => h.config.lambda_dim,
            Model::Baseline(b) => b.lambda.len(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &NdArray<T>)> {
        match self {
            Model::Hyper(h) => h.tensors(),
            Model::Baseline(b) => b.params.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut NdArray<T>> {
        match self {
            Model::Hyper(h) => h.tensors_mut(),
            Model::Baseline(b) => b.params.tensors_mut(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Main-network parameters used at `lambda`. A baseline ignores the
    /// value beyond validating it.
    pub fn generate(&self, lambda: &[T]) -> Result<MainNetParams<T>> {
        match self {
            Model::Hyper(h) => h.generate(lambda),
            Model::Baseline(b) => {
                validate_lambda(lambda, b.lambda.len())?;
                Ok(b.params.clone())
            }
        }
    }

    pub fn reconstruct(&self, lambda: &[T], input: &NdArray<T>) -> Result<NdArray<T>> {
        self.generate(lambda)?.reconstruct(input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Every sample in the batch contributes to the gradient.
    Uhs,
    /// Only the `dhs_keep` samples with the lowest data consistency do.
    Dhs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub sampling: Sampling,
    pub dhs_keep: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Points per lambda axis in the validation grid.
    pub val_grid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            sampling: Sampling::Uhs,
            dhs_keep: 8,
            learning_rate: 1e-3,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_grid: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.sampling == Sampling::Dhs && !(1..=self.batch_size).contains(&self.dhs_keep) {
            return Err(Error::Config(format!("DHS keep count {} must lie in 1..={}", self.dhs_keep, self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if self.val_grid == 0 {
            return Err(Error::Config("validation grid needs at least one point".into()));
        }
        Ok(())
    }

    /// Samples kept per batch of `n`.
    fn keep(&self, n: usize) -> usize {
        match self.sampling {
            Sampling::Uhs => n,
            Sampling::Dhs => self.dhs_keep.min(n),
        }
    }
}

/// `batch` i.i.d. draws from `U[0, 1]^dim`.
pub fn sample_lambda(batch: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..batch).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect()
}

/// Indices of the `keep` smallest values, in ascending order of value with
/// ties broken by index.
pub fn select_dhs<T: PartialOrd>(j: &[T], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..j.len()).collect();
    order.sort_by(|&a, &b| j[a].partial_cmp(&j[b]).unwrap_or(core::cmp::Ordering::Equal));
    order.truncate(keep);
    order
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<NdArray<T>>,
    pub v: Vec<NdArray<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros: Vec<NdArray<T>> = model.tensors().iter().map(|(_, t)| NdArray::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update<T: Real>(
    params: Vec<&mut NdArray<T>>,
    grads: &[NdArray<T>],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_update", "tensor count", params.len(), grads.len()));
    }
    state.step += 1;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let one = T::one();
    let c1 = one - T::of(libm::pow(config.beta1, state.step as f64));
    let c2 = one - T::of(libm::pow(config.beta2, state.step as f64));
    let (lr, eps) = (T::of(config.learning_rate), T::of(config.adam_eps));
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        p.expect_same_shape("adam_update", g)?;
        let (pd, gd) = (p.data_mut(), g.data());
        for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// Mean combined loss over the samples that produced the gradient.
    pub loss: f64,
    /// Batch positions that contributed, in selection order.
    pub selected: Vec<usize>,
    /// Hyperparameters of the contributing samples.
    pub lambdas: Vec<Vec<f64>>,
    /// Data-consistency loss of every sample in the batch.
    pub dc: Vec<f64>,
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Loss terms of one reconstruction evaluated without a tape.
pub fn term_values<T: Real>(
    spec: &LossSpec,
    forward: &ForwardModel,
    sample: &Sample<T>,
    xhat: &NdArray<T>,
    theta: &MainNetParams<T>,
) -> Result<Vec<T>> {
    let target = || {
        sample.target.as_ref().ok_or_else(|| Error::Config("supervised loss term needs a ground-truth image".into()))
    };
    spec.terms
        .iter()
        .map(|term| match term {
            LossTerm::Mae => {
                let t = target()?;
                Ok(xhat.zip_map(&t.clone().reshape(xhat.shape())?, |a, b| (a - b).abs()).mean())
            }
            LossTerm::Ssim => Ok(T::one() - losses::ssim_value(xhat, target()?)?),
            LossTerm::Dc => forward.data_consistency_value(xhat, &sample.measurement),
            LossTerm::L1Weights => Ok(theta.to_flat().iter().map(|v| v.abs()).sum()),
            LossTerm::Tv => losses::tv_value(xhat),
        })
        .collect()
}

struct Recorded {
    params: Vec<Var>,
    outputs: Vec<Var>,
    losses: Vec<Var>,
    terms: Vec<Vec<f64>>,
}

fn record_batch<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    batch: &[&Sample<T>],
    lambdas: &[Vec<T>],
    spec: &LossSpec,
    forward: &ForwardModel,
) -> Result<Recorded> {
    let cfg = model.main_config();
    let layers = cfg.layers()?;
    let k1 = model.lambda_dim();
    let (params, per_sample): (Vec<Var>, Vec<Vec<LayerVars>>) = match model {
        Model::Hyper(h) => {
            let flat: Vec<T> = lambdas.iter().flatten().copied().collect();
            let lam = NdArray::new(&[batch.len(), k1], flat)?;
            let vars = h.record(tape, &lam)?;
            let rows =
                (0..batch.len()).map(|i| theta_row(tape, &layers, &vars.thetas, i)).collect::<Result<Vec<_>>>()?;
            (vars.params, rows)
        }
        Model::Baseline(b) => {
            let lv = b.params.record(tape);
            let params = lv.iter().flat_map(|l| [l.kernel, l.bias]).collect();
            (params, vec![lv; batch.len()])
        }
    };
    let mut outputs = Vec::with_capacity(batch.len());
    let mut losses = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for ((sample, lv), lambda) in batch.iter().zip(&per_sample).zip(lambdas) {
        let (h, w) = cfg.check_input(sample.input.shape())?;
        let x = tape.constant(sample.input.clone().reshape(&[1, cfg.in_channels, h, w])?);
        let residual = if cfg.residual { Some(sample.zero_filled()?) } else { None };
        let y = main_forward(tape, cfg, lv, x, residual.as_ref())?;
        let y = tape.reshape(y, &[h, w])?;
        outputs.push(y);
        let weights: Vec<Var> = lv.iter().flat_map(|l| [l.kernel, l.bias]).collect();
        let ctx = LossContext {
            target: sample.target.as_ref(),
            forward,
            measurement: &sample.measurement,
            weights: &weights,
        };
        let tv = spec.terms_on_tape(tape, &ctx, y)?;
        terms.push(tv.iter().map(|&v| to_f64(tape.value(v).item())).collect());
        losses.push(spec.combine_on_tape(tape, &tv, lambda)?);
    }
    Ok(Recorded { params, outputs, losses, terms })
}

/// One optimizer step on a batch: combined losses for every sample, sample
/// selection, backpropagation of the mean over the selected samples and an
/// Adam update. Fails without touching the model if anything is non-finite.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    batch: &[&Sample<T>],
    lambdas: &[Vec<f64>],
    spec: &LossSpec,
    forward: &ForwardModel,
    config: &TrainConfig,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::Empty("train_step: empty batch".into()));
    }
    if lambdas.len() != batch.len() {
        return Err(Error::shape("train_step", "lambda count", batch.len(), lambdas.len()));
    }
    let lam_t: Vec<Vec<T>> = lambdas.iter().map(|l| l.iter().map(|&v| T::of(v)).collect()).collect();
    let mut tape = Tape::new();
    let rec = record_batch(&mut tape, model, batch, &lam_t, spec, forward)?;

    let loss_values: Vec<f64> = rec.losses.iter().map(|&l| to_f64(tape.value(l).item())).collect();
    for (i, &l) in loss_values.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss {l} at lambda {:?} with terms {:?}", lambdas[i], rec.terms[i])));
        }
    }
    let dc: Vec<f64> = match spec.terms.iter().position(|t| *t == LossTerm::Dc) {
        Some(p) => rec.terms.iter().map(|t| t[p]).collect(),
        None => batch
            .iter()
            .zip(&rec.outputs)
            .map(|(s, &y)| Ok(to_f64(forward.data_consistency_value(tape.value(y), &s.measurement)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    let selected = select_dhs(&dc, config.keep(batch.len()));

    let scale = T::one() / T::from_usize(selected.len()).unwrap();
    let mut chosen = vec![false; batch.len()];
    for &i in &selected {
        chosen[i] = true;
    }
    // seeds in batch order keep the reduction order independent of selection
    let seeds = (0..batch.len()).filter(|&i| chosen[i]).map(|i| (rec.losses[i], NdArray::scalar(scale))).collect();
    let mut grads = tape.backward_seeded(seeds)?;
    let g: Vec<NdArray<T>> =
        rec.params.iter().map(|&p| grads.take(p).unwrap_or_else(|| NdArray::zeros(tape.value(p).shape()))).collect();
    if let Some(bad) = g.iter().position(|a| !a.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter tensor {bad} at lambdas {lambdas:?}")));
    }
    let mut next = model.clone();
    adam_update(next.tensors_mut(), &g, adam, config)?;
    if !next.all_finite() {
        return Err(Error::NonFinite(format!("parameters after update at lambdas {lambdas:?}")));
    }
    *model = next;
    Ok(StepLog {
        loss: selected.iter().map(|&i| loss_values[i]).sum::<f64>() / selected.len() as f64,
        lambdas: selected.iter().map(|&i| lambdas[i].clone()).collect(),
        selected,
        dc,
    })
}

/// `n` evenly spaced points per axis over `[0, 1]^dim`, last axis fastest.
/// A single point sits at 0.
pub fn lambda_grid(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..n).map(|j| if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 }).collect();
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&a| {
                    let mut p = prefix.clone();
                    p.push(a);
                    p
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    /// Mean combined loss.
    pub loss: f64,
    /// Mean of each unweighted loss term.
    pub terms: Vec<f64>,
}

/// Mean combined loss and unweighted terms of `model` at one lambda.
pub fn loss_at<T: Real>(
    model: &Model<T>,
    lambda: &[f64],
    data: &Dataset<T>,
    spec: &LossSpec,
) -> Result<ValidationScore> {
    mean_scores(model, &[lambda.to_vec()], data, spec)
}

fn mean_scores<T: Real>(
    model: &Model<T>,
    points: &[Vec<f64>],
    data: &Dataset<T>,
    spec: &LossSpec,
) -> Result<ValidationScore> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let mut loss = 0.0;
    let mut terms = vec![0.0; spec.arity()];
    for lambda in points {
        let lam: Vec<T> = lambda.iter().map(|&v| T::of(v)).collect();
        let theta = model.generate(&lam)?;
        for s in &data.samples {
            let xhat = theta.reconstruct(&s.input)?;
            let tv = term_values(spec, &data.forward, s, &xhat, &theta)?;
            loss += to_f64(spec.combine_values(&tv, &lam)?);
            for (acc, v) in terms.iter_mut().zip(&tv) {
                *acc += to_f64(*v);
            }
        }
    }
    let n = (points.len() * data.len()) as f64;
    Ok(ValidationScore { loss: loss / n, terms: terms.iter().map(|t| t / n).collect() })
}

/// Validation loss of a model: averaged over the lambda grid for a
/// hypernetwork, at the fixed lambda for a baseline.
pub fn validate<T: Real>(model: &Model<T>, data: &Dataset<T>, spec: &LossSpec, grid: usize) -> Result<ValidationScore> {
    let points = match model {
        Model::Hyper(h) => lambda_grid(h.config.lambda_dim, grid),
        Model::Baseline(b) => vec![b.lambda.clone()],
    };
    mean_scores(model, &points, data, spec)
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val: ValidationScore,
    /// Hyperparameters of every sample that contributed a gradient.
    pub lambdas: Vec<Vec<f64>>,
}

/// Parameters with the lowest validation loss seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModel<T> {
    pub epoch: usize,
    pub score: f64,
    pub tensors: Vec<NdArray<T>>,
}

/// Mutable training state; everything needed to resume lives here.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub spec: LossSpec,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochLog>,
    pub best: Option<BestModel<T>>,
}

/// Stream of the epoch RNG; initialization uses stream 0 of the same seed.
pub const TRAIN_STREAM: u64 = 1;

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

impl<T: Real> Trainer<T> {
    pub fn from_model(model: Model<T>, spec: LossSpec, config: TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if spec.arity() != model.lambda_dim() + 1 {
            return Err(Error::Config(format!(
                "{} loss terms need {} hyperparameters, model takes {}",
                spec.arity(),
                spec.arity() - 1,
                model.lambda_dim()
            )));
        }
        if let Model::Baseline(b) = &model {
            validate_lambda(&b.lambda, b.lambda.len())?;
        }
        Ok(Self {
            adam: AdamState::new(&model),
            rng: train_rng(config.seed),
            model,
            spec,
            config,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn hyper(main: &MainNetConfig, hyper: &HyperNetConfig, spec: LossSpec, config: TrainConfig) -> Result<Self> {
        let net = HyperNet::init(main, hyper, config.seed)?;
        Self::from_model(Model::Hyper(net), spec, config)
    }

    pub fn baseline(main: &MainNetConfig, lambda: &[f64], spec: LossSpec, config: TrainConfig) -> Result<Self> {
        let params = MainNetParams::kaiming(main, config.seed)?;
        Self::from_model(Model::Baseline(Baseline { params, lambda: lambda.to_vec() }), spec, config)
    }

    fn check_data(&self, data: &Dataset<T>, what: &str) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty(format!("{what} set is empty")));
        }
        if self.spec.mode == LossMode::Sl && data.samples.iter().any(|s| s.target.is_none()) {
            return Err(Error::Config(format!("supervised training needs ground truth for every {what} sample")));
        }
        Ok(())
    }

    /// Runs one epoch of shuffled mini-batches followed by validation.
    pub fn run_epoch(&mut self, train: &Dataset<T>, val: &Dataset<T>) -> Result<&EpochLog> {
        self.check_data(train, "training")?;
        self.check_data(val, "validation")?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let k1 = self.model.lambda_dim();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut used = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let lambdas = match &self.model {
                Model::Hyper(_) => sample_lambda(batch.len(), k1, &mut self.rng),
                Model::Baseline(b) => vec![b.lambda.clone(); batch.len()],
            };
            let log = train_step(
                &mut self.model,
                &mut self.adam,
                &batch,
                &lambdas,
                &self.spec,
                &train.forward,
                &self.config,
            )?;
            loss_sum += log.loss;
            steps += 1;
            used.extend(log.lambdas);
        }
        self.epoch += 1;
        let val = validate(&self.model, val, &self.spec, self.config.val_grid)?;
        if self.best.as_ref().is_none_or(|b| val.loss < b.score) {
            self.best = Some(BestModel {
                epoch: self.epoch,
                score: val.loss,
                tensors: self.model.tensors().into_iter().map(|(_, t)| t.clone()).collect(),
            });
        }
        self.history.push(EpochLog { epoch: self.epoch, train_loss: loss_sum / steps as f64, val, lambdas: used });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Trains until `config.epochs` epochs are complete, reporting each one.
    pub fn run(&mut self, train: &Dataset<T>, val: &Dataset<T>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while self.epoch < self.config.epochs {
            on_epoch(self.run_epoch(train, val)?);
        }
        Ok(())
    }

    /// The model with the best validation parameters, or the current one
    /// before any epoch has finished.
    pub fn best_model(&self) -> Model<T> {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            for (dst, src) in m.tensors_mut().into_iter().zip(&best.tensors) {
                *dst = src.clone();
            }
        }
        m
    }
}

/// Trains a hypernetwork for `config.epochs` epochs.
pub fn train<T: Real>(
    main: &MainNetConfig,
    hyper: &HyperNetConfig,
    spec: LossSpec,
    config: TrainConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
) -> Result<Trainer<T>> {
    let mut t = Trainer::hyper(main, hyper, spec, config)?;
    t.run(train, val, |_| {})?;
    Ok(t)
}

/// Trains a plain main network at a fixed lambda.
pub fn train_baseline<T: Real>(
    main: &MainNetConfig,
    lambda: &[f64],
    spec: LossSpec,
    config: TrainConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
) -> Result<Trainer<T>> {
    let mut t = Trainer::baseline(main, lambda, spec, config)?;
    t.run(train, val, |_| {})?;
    Ok(t)
}

/// Calibrated scaling factors and the two single-term models behind them.
#[derive(Debug, Clone)]
pub struct Calibration<T> {
    pub scaling: ScalingFactors,
    /// Trained at lambda 0 and lambda 1.
    pub baselines: Vec<Trainer<T>>,
}

/// Trains one baseline per loss term (lambda 0 and 1 of a two-term
/// supervised loss, unit scaling) and takes each model's validation loss on
/// its own term as the best-case value `s_i`.
pub fn calibrate_scaling<T: Real>(
    main: &MainNetConfig,
    spec: &LossSpec,
    config: TrainConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
) -> Result<Calibration<T>> {
    spec.validate()?;
    if spec.mode == LossMode::Ao {
        return Err(Error::Config(
            "amortized losses have zero best-case values; set the scaling factors in the config".into(),
        ));
    }
    if spec.arity() != 2 {
        return Err(Error::Config("calibration expects a two-term loss".into()));
    }
    let unit = LossSpec { alphas: vec![1.0; spec.arity()], ..spec.clone() };
    let mut baselines = Vec::new();
    let mut best = Vec::new();
    for (term, lambda) in [(0usize, 0.0), (1, 1.0)] {
        let t = train_baseline(main, &[lambda], unit.clone(), config.clone(), train, val)?;
        let score = validate(&t.best_model(), val, &unit, config.val_grid)?;
        best.push(score.terms[term]);
        baselines.push(t);
    }
    Ok(Calibration { scaling: ScalingFactors::from_validation_losses(&best)?, baselines })
}

/// Counts of hyperparameter values over `bins` equal cells per axis,
/// row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaHistogram {
    pub bins: usize,
    pub dim: usize,
    pub counts: Vec<usize>,
}

impl LambdaHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Pearson statistic against the uniform distribution; compare with a
    /// chi-square distribution with `counts.len() - 1` degrees of freedom.
    pub fn chi_square_uniform(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let expected = total as f64 / self.counts.len() as f64;
        self.counts.iter().map(|&c| (c as f64 - expected) * (c as f64 - expected) / expected).sum()
    }
}

pub fn lambda_histogram(lambdas: &[Vec<f64>], bins: usize) -> LambdaHistogram {
    let Some(first) = lambdas.first() else {
        return LambdaHistogram { bins, dim: 0, counts: Vec::new() };
    };
    let dim = first.len();
    let mut counts = vec![0usize; bins.pow(dim as u32)];
    for l in lambdas {
        let mut cell = 0;
        for &v in l {
            let b = ((v * bins as f64) as usize).min(bins - 1);
            cell = cell * bins + b;
        }
        counts[cell] += 1;
    }
    LambdaHistogram { bins, dim, counts }
}

/// Histogram of the hyperparameters that produced gradients in one epoch.
pub fn epoch_lambda_histogram(log: &EpochLog, bins: usize) -> LambdaHistogram {
    lambda_histogram(&log.lambdas, bins)
}
