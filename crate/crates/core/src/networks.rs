//! The main reconstruction network (a small Unet) and the hypernetwork that
//! maps loss weights to its parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NdArray, Tape, Var};
use crate::scalar::Real;

/// Number of fully connected layers in the hypernetwork trunk.
pub const FC_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MainNetConfig {
    /// 2 for complex zero-filled input, 1 otherwise.
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
    pub kernel_size: usize,
    /// Add the input magnitude to the network output.
    pub residual: bool,
    pub leaky_slope: f64,
}

impl Default for MainNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, hidden_channels: 16, depth: 2, kernel_size: 3, residual: true, leaky_slope: 0.01 }
    }
}

/// Shape of one convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
}

impl LayerShape {
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
    }

    /// `Cout * Cin * k^2 + Cout`.
    pub fn param_count(&self) -> usize {
        self.kernel_len() + self.out_channels
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }

    /// Bound of the Kaiming-uniform distribution for the kernel.
    pub fn kaiming_bound(&self) -> f64 {
        libm::sqrt(6.0 / self.fan_in() as f64)
    }

    /// Standard deviation of Kaiming-initialized kernel entries.
    pub fn kaiming_std(&self) -> f64 {
        libm::sqrt(2.0 / self.fan_in() as f64)
    }

    pub fn bias_bound(&self) -> f64 {
        1.0 / libm::sqrt(self.fan_in() as f64)
    }
}

impl MainNetConfig {
    pub fn with_channels(in_channels: usize) -> Self {
        Self { in_channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("main network needs at least one input channel".into()));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("main network hidden channel count must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        Ok(())
    }

    /// Layers in evaluation order: two input convolutions, two per encoder
    /// level, two per decoder level, then a 1x1 output projection.
    pub fn layers(&self) -> Result<Vec<LayerShape>> {
        self.validate()?;
        let (h, k) = (self.hidden_channels, self.kernel_size);
        let conv = |name: String, cin: usize, cout: usize, k: usize| LayerShape {
            name,
            out_channels: cout,
            in_channels: cin,
            kernel_size: k,
        };
        let mut out = vec![conv("enc0.conv1".into(), self.in_channels, h, k), conv("enc0.conv2".into(), h, h, k)];
        for level in 1..=self.depth {
            out.push(conv(format!("down{level}.conv1"), h, h, k));
            out.push(conv(format!("down{level}.conv2"), h, h, k));
        }
        for level in (1..=self.depth).rev() {
            out.push(conv(format!("up{level}.conv1"), 2 * h, h, k));
            out.push(conv(format!("up{level}.conv2"), h, h, k));
        }
        out.push(conv("out".into(), h, 1, 1));
        Ok(out)
    }

    /// Total parameter count `P`.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(LayerShape::param_count).sum())
    }

    /// Checks that a `channels x height x width` input fits the network.
    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let [c, h, w] = *shape else {
            return Err(Error::Rank { op: "main network input", expected: 3, got: shape.len() });
        };
        if c != self.in_channels {
            return Err(Error::shape("main network input", "channels", self.in_channels, c));
        }
        let step = 1usize << self.depth;
        if h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!("{h}x{w} input is not divisible by {step} for depth {}", self.depth)));
        }
        Ok((h, w))
    }
}

/// Real image the residual connection adds: the channel itself for
/// one-channel input, the complex magnitude for two channels.
pub fn input_magnitude<T: Real>(input: &NdArray<T>) -> Result<NdArray<T>> {
    input.expect_rank("input_magnitude", 3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let n = h * w;
    let d = input.data();
    match c {
        1 => NdArray::new(&[h, w], d.to_vec()),
        2 => Ok(NdArray::from_fn(&[h, w], |i| (d[i] * d[i] + d[n + i] * d[n + i]).sqrt())),
        _ => Err(Error::shape("input_magnitude", "channels", 2, c)),
    }
}

/// Kernel and bias handles of one layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub kernel: Var,
    pub bias: Var,
}

/// Records the main network on `tape`. `input` is `[1, C, H, W]`; the
/// result is `[1, 1, H, W]`.
pub fn main_forward<T: Real>(
    tape: &mut Tape<T>,
    config: &MainNetConfig,
    layers: &[LayerVars],
    input: Var,
    residual: Option<&NdArray<T>>,
) -> Result<Var> {
    let expected = 3 + 4 * config.depth;
    if layers.len() != expected {
        return Err(Error::shape("main network", "layer count", expected, layers.len()));
    }
    let pad = config.kernel_size / 2;
    let slope = T::of(config.leaky_slope);
    let mut idx = 0;
    let mut conv_act = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let l = layers[idx];
        idx += 1;
        let y = tape.conv2d(x, l.kernel, l.bias, pad)?;
        Ok(tape.leaky_relu(y, slope))
    };

    let mut x = conv_act(tape, input)?;
    x = conv_act(tape, x)?;
    let mut skips = vec![x];
    for level in 1..=config.depth {
        x = tape.avgpool2(x)?;
        x = conv_act(tape, x)?;
        x = conv_act(tape, x)?;
        if level < config.depth {
            skips.push(x);
        }
    }
    for _ in 1..=config.depth {
        x = tape.upsample2(x)?;
        let skip = skips.pop().expect("one skip per level");
        x = tape.concat_channels(x, skip)?;
        x = conv_act(tape, x)?;
        x = conv_act(tape, x)?;
    }
    let out = layers[expected - 1];
    let mut y = tape.conv2d(x, out.kernel, out.bias, 0)?;
    if let Some(r) = residual {
        let shape = tape.value(y).shape().to_vec();
        let r = tape.constant(r.clone().reshape(&shape)?);
        y = tape.add(y, r)?;
    }
    Ok(y)
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> NdArray<T> {
    NdArray::from_fn(shape, |_| if bound > 0.0 { T::of(rng.gen_range(-bound..bound)) } else { T::zero() })
}

/// Main-network parameters `theta`, one kernel and bias per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MainNetParams<T> {
    pub config: MainNetConfig,
    pub kernels: Vec<NdArray<T>>,
    pub biases: Vec<NdArray<T>>,
}

impl<T: Real> MainNetParams<T> {
    pub fn zeros(config: &MainNetConfig) -> Result<Self> {
        let layers = config.layers()?;
        Ok(Self {
            config: config.clone(),
            kernels: layers.iter().map(|l| NdArray::zeros(&l.kernel_shape())).collect(),
            biases: layers.iter().map(|l| NdArray::zeros(&[l.out_channels])).collect(),
        })
    }

    /// Kaiming-uniform kernels and `U(+-1/sqrt(fan_in))` biases.
    pub fn kaiming(config: &MainNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config.layers()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for l in &layers {
            kernels.push(uniform(&mut rng, &l.kernel_shape(), l.kaiming_bound()));
            biases.push(uniform(&mut rng, &[l.out_channels], l.bias_bound()));
        }
        Ok(Self { config: config.clone(), kernels, biases })
    }

    /// Splits a flat vector laid out as `[kernel_0, bias_0, kernel_1, ...]`.
    pub fn from_flat(config: &MainNetConfig, flat: &[T]) -> Result<Self> {
        let layers = config.layers()?;
        let total: usize = layers.iter().map(LayerShape::param_count).sum();
        if flat.len() != total {
            return Err(Error::shape("MainNetParams::from_flat", "parameter count", total, flat.len()));
        }
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut at = 0;
        for l in &layers {
            let kl = l.kernel_len();
            kernels.push(NdArray::new(&l.kernel_shape(), flat[at..at + kl].to_vec())?);
            biases.push(NdArray::new(&[l.out_channels], flat[at + kl..at + l.param_count()].to_vec())?);
            at += l.param_count();
        }
        Ok(Self { config: config.clone(), kernels, biases })
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            out.extend_from_slice(k.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().zip(&self.biases).map(|(k, b)| k.len() + b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.kernels.iter().chain(&self.biases).all(NdArray::all_finite)
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &NdArray<T>)> {
        let layers = self.config.layers().expect("validated at construction");
        let mut out = Vec::new();
        for ((l, k), b) in layers.iter().zip(&self.kernels).zip(&self.biases) {
            out.push((format!("{}.weight", l.name), k));
            out.push((format!("{}.bias", l.name), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut NdArray<T>> {
        let mut out = Vec::new();
        for (k, b) in self.kernels.iter_mut().zip(self.biases.iter_mut()) {
            out.push(k);
            out.push(b);
        }
        out
    }

    /// Adds every kernel and bias to the tape as a leaf.
    pub fn record(&self, tape: &mut Tape<T>) -> Vec<LayerVars> {
        self.kernels
            .iter()
            .zip(&self.biases)
            .map(|(k, b)| LayerVars { kernel: tape.leaf(k.clone()), bias: tape.leaf(b.clone()) })
            .collect()
    }

    /// Runs the network on a `[C, H, W]` input and returns `[H, W]`.
    pub fn reconstruct(&self, input: &NdArray<T>) -> Result<NdArray<T>> {
        let (h, w) = self.config.check_input(input.shape())?;
        let mut tape = Tape::new();
        let layers: Vec<LayerVars> = self
            .kernels
            .iter()
            .zip(&self.biases)
            .map(|(k, b)| LayerVars { kernel: tape.constant(k.clone()), bias: tape.constant(b.clone()) })
            .collect();
        let x = tape.constant(input.clone().reshape(&[1, self.config.in_channels, h, w])?);
        let residual = if self.config.residual { Some(input_magnitude(input)?) } else { None };
        let y = main_forward(&mut tape, &self.config, &layers, x, residual.as_ref())?;
        finite_image(tape.value(y), h, w)
    }
}

fn finite_image<T: Real>(y: &NdArray<T>, h: usize, w: usize) -> Result<NdArray<T>> {
    if !y.all_finite() {
        return Err(Error::NonFinite("reconstruction contains non-finite values".into()));
    }
    y.clone().reshape(&[h, w])
}

/// Trunk width and hyperparameter count of a hypernetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    /// `K - 1`.
    pub lambda_dim: usize,
    /// Embedding width `d`.
    pub width: usize,
}

impl HyperNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.lambda_dim) {
            return Err(Error::Config(format!("hypernetwork takes 1 or 2 hyperparameters, got {}", self.lambda_dim)));
        }
        if self.width == 0 {
            return Err(Error::Config("hypernetwork width must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: NdArray<T>,
    pub bias: NdArray<T>,
}

/// Hypernetwork parameters `phi`: a five-layer trunk producing a shared
/// embedding and one linear projection head per main-network layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet<T> {
    pub main: MainNetConfig,
    pub config: HyperNetConfig,
    pub trunk: Vec<Dense<T>>,
    pub heads: Vec<Dense<T>>,
}

/// Tape handles of one batched hypernetwork evaluation.
#[derive(Debug, Clone)]
pub struct HyperVars {
    /// Leaves in [`HyperNet::tensors`] order.
    pub params: Vec<Var>,
    /// `[B, d]`.
    pub embedding: Var,
    /// Per main-network layer, `[B, P_l]` with each row `[kernel, bias]`.
    pub thetas: Vec<Var>,
}

/// Checks that every entry lies in `[0, 1]`.
pub fn validate_lambda<T: Real>(lambda: &[T], expected_len: usize) -> Result<()> {
    if lambda.len() != expected_len {
        return Err(Error::shape("lambda", "length", expected_len, lambda.len()));
    }
    for (i, &l) in lambda.iter().enumerate() {
        if !(l >= T::zero() && l <= T::one()) {
            return Err(Error::OutOfRange {
                field: format!("lambda[{i}]"),
                value: l.to_f64().unwrap_or(f64::NAN),
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    Ok(())
}

impl<T: Real> HyperNet<T> {
    /// Trunk layers are Kaiming-uniform. Head weights are drawn from
    /// `U(+-k_l / sqrt(d L))`, where `k_l` is the Kaiming bound of the
    /// generated layer and `L` the number of main-network layers; head
    /// biases hold a Kaiming-initialized copy of that layer, so generated
    /// weights start at the scale of a conventionally initialized network.
    pub fn init(main: &MainNetConfig, config: &HyperNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = main.layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut trunk = Vec::new();
        for i in 0..FC_LAYERS {
            let fan_in = if i == 0 { config.lambda_dim } else { d };
            let bound = libm::sqrt(6.0 / fan_in as f64);
            let weight = uniform(&mut rng, &[d, fan_in], bound);
            let bias = uniform(&mut rng, &[d], 1.0 / libm::sqrt(fan_in as f64));
            trunk.push(Dense { weight, bias });
        }
        let depth_scale = libm::sqrt((d * layers.len()) as f64);
        let mut heads = Vec::new();
        for l in &layers {
            let weight = uniform(&mut rng, &[l.param_count(), d], l.kaiming_bound() / depth_scale);
            let kernel: NdArray<T> = uniform(&mut rng, &[l.kernel_len()], l.kaiming_bound());
            let bias: NdArray<T> = uniform(&mut rng, &[l.out_channels], l.bias_bound());
            let mut b = kernel.into_data();
            b.extend_from_slice(bias.data());
            heads.push(Dense { weight, bias: NdArray::new(&[l.param_count()], b)? });
        }
        Ok(Self { main: main.clone(), config: config.clone(), trunk, heads })
    }

    /// All-zero parameters: the generated network is zero for every lambda.
    pub fn zeros(main: &MainNetConfig, config: &HyperNetConfig) -> Result<Self> {
        config.validate()?;
        let layers = main.layers()?;
        let d = config.width;
        let trunk = (0..FC_LAYERS)
            .map(|i| {
                let fan_in = if i == 0 { config.lambda_dim } else { d };
                Dense { weight: NdArray::zeros(&[d, fan_in]), bias: NdArray::zeros(&[d]) }
            })
            .collect();
        let heads = layers
            .iter()
            .map(|l| Dense { weight: NdArray::zeros(&[l.param_count(), d]), bias: NdArray::zeros(&[l.param_count()]) })
            .collect();
        Ok(Self { main: main.clone(), config: config.clone(), trunk, heads })
    }

    /// Zeroes every projection weight, leaving a lambda-independent network
    /// equal to the head biases.
    pub fn zero_projections(&mut self) {
        for h in &mut self.heads {
            h.weight = NdArray::zeros(h.weight.shape());
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let layers = self.main.layers().expect("validated at construction");
        let mut out = Vec::new();
        for i in 0..self.trunk.len() {
            out.push(format!("fc{}.weight", i + 1));
            out.push(format!("fc{}.bias", i + 1));
        }
        for l in &layers {
            out.push(format!("head.{}.weight", l.name));
            out.push(format!("head.{}.bias", l.name));
        }
        out
    }

    /// Named tensors in a fixed order shared by the optimizer and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &NdArray<T>)> {
        let arrays = self.trunk.iter().chain(&self.heads).flat_map(|d| [&d.weight, &d.bias]);
        self.tensor_names().into_iter().zip(arrays).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut NdArray<T>> {
        self.trunk.iter_mut().chain(self.heads.iter_mut()).flat_map(|d| [&mut d.weight, &mut d.bias]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Records the hypernetwork for a `[B, K-1]` batch of hyperparameters.
    pub fn record(&self, tape: &mut Tape<T>, lambdas: &NdArray<T>) -> Result<HyperVars> {
        lambdas.expect_rank("hypernetwork", 2)?;
        let k1 = self.config.lambda_dim;
        if lambdas.shape()[1] != k1 {
            return Err(Error::shape("hypernetwork", "lambda width", k1, lambdas.shape()[1]));
        }
        for row in lambdas.data().chunks(k1) {
            validate_lambda(row, k1)?;
        }
        let params: Vec<Var> = self
            .trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|d| [d.weight.clone(), d.bias.clone()])
            .map(|a| tape.leaf(a))
            .collect();
        self.record_with(tape, params, lambdas)
    }

    /// Like [`HyperNet::record`] but with caller-supplied parameter handles
    /// (in [`HyperNet::tensors`] order); `self` only provides the config.
    pub fn record_with(&self, tape: &mut Tape<T>, params: Vec<Var>, lambdas: &NdArray<T>) -> Result<HyperVars> {
        let expected = 2 * (FC_LAYERS + self.heads.len());
        if params.len() != expected {
            return Err(Error::shape("hypernetwork", "parameter tensors", expected, params.len()));
        }
        let slope = T::of(self.main.leaky_slope);
        let mut x = tape.constant(lambdas.clone());
        for i in 0..FC_LAYERS {
            x = tape.linear(x, params[2 * i], params[2 * i + 1])?;
            if i + 1 < FC_LAYERS {
                x = tape.leaky_relu(x, slope);
            }
        }
        let embedding = x;
        let base = 2 * FC_LAYERS;
        let thetas = (0..self.heads.len())
            .map(|l| tape.linear(embedding, params[base + 2 * l], params[base + 2 * l + 1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(HyperVars { params, embedding, thetas })
    }

    /// Embedding and generated parameters for one lambda.
    pub fn forward(&self, lambda: &[T]) -> Result<(Vec<T>, MainNetParams<T>)> {
        let mut tape = Tape::new();
        let lam = NdArray::new(&[1, lambda.len()], lambda.to_vec())?;
        if lambda.len() != self.config.lambda_dim {
            return Err(Error::shape("lambda", "length", self.config.lambda_dim, lambda.len()));
        }
        let vars = self.record(&mut tape, &lam)?;
        let mut flat = Vec::new();
        for &t in &vars.thetas {
            flat.extend_from_slice(tape.value(t).data());
        }
        let theta = MainNetParams::from_flat(&self.main, &flat)?;
        Ok((tape.value(vars.embedding).data().to_vec(), theta))
    }

    /// Generated main-network parameters for one lambda.
    pub fn generate(&self, lambda: &[T]) -> Result<MainNetParams<T>> {
        Ok(self.forward(lambda)?.1)
    }

    /// `x_hat = M_{H(lambda)}(input)` for a `[C, H, W]` zero-filled input.
    pub fn reconstruct(&self, lambda: &[T], input: &NdArray<T>) -> Result<NdArray<T>> {
        self.generate(lambda)?.reconstruct(input)
    }
}

/// Slices sample `row` of every generated `[B, P_l]` layer into kernel and
/// bias handles.
pub fn theta_row<T: Real>(
    tape: &mut Tape<T>,
    layers: &[LayerShape],
    thetas: &[Var],
    row: usize,
) -> Result<Vec<LayerVars>> {
    layers
        .iter()
        .zip(thetas)
        .map(|(l, &t)| {
            let start = row * l.param_count();
            let kernel = tape.slice(t, start, &l.kernel_shape())?;
            let bias = tape.slice(t, start + l.kernel_len(), &[l.out_channels])?;
            Ok(LayerVars { kernel, bias })
        })
        .collect()
}
