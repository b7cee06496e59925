//! Degradation operators, undersampling masks, zero-filled inversion and the
//! data-consistency loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ifft2, BackwardRule, ComplexPair, NdArray, Tape, Var};
use crate::scalar::Real;

/// Binary k-space sampling pattern, stored with DC at `(H/2, W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    grid: Vec<bool>,
    acceleration: f64,
    calibration: usize,
}

impl Mask {
    /// A mask that samples every frequency.
    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, grid: vec![true; height * width], acceleration: 1.0, calibration: height.min(width) }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn calibration(&self) -> usize {
        self.calibration
    }

    /// Centered grid, row-major.
    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.count() as f64 / self.grid.len() as f64
    }

    /// Whether the unshifted frequency `(ky, kx)` (DC at `(0, 0)`) is kept.
    pub fn keeps(&self, ky: usize, kx: usize) -> bool {
        let r = (ky + self.height / 2) % self.height;
        let c = (kx + self.width / 2) % self.width;
        self.grid[r * self.width + c]
    }

    /// Indicator in FFT layout (DC at `(0, 0)`).
    pub fn unshifted<T: Real>(&self) -> NdArray<T> {
        NdArray::from_fn(&[self.height, self.width], |i| {
            if self.keeps(i / self.width, i % self.width) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Rebuilds a mask from a centered grid, e.g. one read back from disk.
    pub fn from_grid(
        height: usize,
        width: usize,
        grid: Vec<bool>,
        acceleration: f64,
        calibration: usize,
    ) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape("Mask::from_grid", "grid length", height * width, grid.len()));
        }
        Ok(Self { height, width, grid, acceleration, calibration })
    }
}

/// Variable-density Bernoulli undersampling.
///
/// Each frequency at radius `r` from DC is kept with probability
/// `min(1, c * (1 - r / r_max)^p)`, with `c` chosen so the expected sampled
/// fraction is `1 / acceleration`. A `calibration x calibration` square around
/// DC is always kept.
pub fn make_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    calibration: usize,
    density_exponent: f64,
    seed: u64,
) -> Result<Mask> {
    if !(acceleration >= 1.0) || !acceleration.is_finite() {
        return Err(Error::OutOfRange {
            field: "acceleration".into(),
            value: acceleration,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    if calibration > height.min(width) {
        return Err(Error::Config(format!("calibration square {calibration} exceeds grid {height}x{width}")));
    }
    if acceleration == 1.0 {
        let mut mask = Mask::full(height, width);
        mask.calibration = calibration;
        return Ok(mask);
    }
    let total = height * width;
    let target = total as f64 / acceleration;
    let calib_count = calibration * calibration;
    if calib_count as f64 > target {
        return Err(Error::Config(format!(
            "calibration square of {calib_count} samples exceeds the budget of {target:.0} at acceleration {acceleration}"
        )));
    }
    let (cy, cx) = (height / 2, width / 2);
    let (r0, c0) = (cy - calibration / 2, cx - calibration / 2);
    let in_calib = |r: usize, c: usize| r >= r0 && r < r0 + calibration && c >= c0 && c < c0 + calibration;
    let r_max = libm::hypot(cy as f64, cx as f64);
    let density: Vec<f64> = (0..total)
        .map(|i| {
            let (r, c) = (i / width, i % width);
            if in_calib(r, c) {
                return 0.0;
            }
            let rad = libm::hypot(r as f64 - cy as f64, c as f64 - cx as f64);
            libm::pow((1.0 - rad / r_max).max(0.0), density_exponent)
        })
        .collect();
    let budget = target - calib_count as f64;
    let expected = |scale: f64| density.iter().map(|&d| (scale * d).min(1.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while expected(hi) < budget && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = (0..total)
        .map(|i| {
            let p = (hi * density[i]).min(1.0);
            let draw: f64 = rng.gen();
            in_calib(i / width, i % width) || draw < p
        })
        .collect();
    Ok(Mask { height, width, grid, acceleration, calibration })
}

/// Reconstruction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Csmri,
    Denoise,
    Sr,
}

/// Serializable description of a forward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Noise standard deviation for denoising.
    pub sigma: f64,
    /// Superresolution factor.
    pub factor: usize,
    pub acceleration: f64,
    pub calibration: usize,
    pub density_exponent: f64,
    pub mask_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Csmri,
            sigma: 0.1,
            factor: 4,
            acceleration: 4.0,
            calibration: 8,
            density_exponent: 6.0,
            mask_seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn build(&self, height: usize, width: usize) -> Result<ForwardModel> {
        Ok(match self.kind {
            TaskKind::Denoise => {
                if !(self.sigma >= 0.0) {
                    return Err(Error::Config(format!("noise sigma {} must be non-negative", self.sigma)));
                }
                ForwardModel::Denoise { sigma: self.sigma }
            }
            TaskKind::Sr => ForwardModel::Downsample { factor: self.factor },
            TaskKind::Csmri => ForwardModel::Fourier {
                mask: make_mask(
                    height,
                    width,
                    self.acceleration,
                    self.calibration,
                    self.density_exponent,
                    self.mask_seed,
                )?,
            },
        })
    }
}

/// Which degradation a task applies.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardModel {
    /// `A = I` plus white Gaussian noise of standard deviation `sigma`.
    Denoise { sigma: f64 },
    /// Block-average decimation by `factor`, then nearest-neighbour
    /// upsampling back to the full grid.
    Downsample { factor: usize },
    /// Undersampled orthonormal DFT.
    Fourier { mask: Mask },
}

/// Observed data for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement<T> {
    Image(NdArray<T>),
    KSpace(ComplexPair<T>),
}

impl<T: Real> Measurement<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Measurement::Image(a) => a.shape(),
            Measurement::KSpace(k) => k.shape(),
        }
    }
}

impl ForwardModel {
    /// Number of channels of the zero-filled network input.
    pub fn input_channels(&self) -> usize {
        match self {
            ForwardModel::Fourier { .. } => 2,
            _ => 1,
        }
    }

    fn check_image<T: Real>(&self, x: &NdArray<T>) -> Result<(usize, usize)> {
        x.expect_rank("forward model", 2)?;
        let (h, w) = (x.shape()[0], x.shape()[1]);
        match self {
            ForwardModel::Downsample { factor } => {
                if *factor == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(Error::Config(format!("downsampling factor {factor} does not divide {h}x{w}")));
                }
            }
            ForwardModel::Fourier { mask } => {
                if mask.height != h {
                    return Err(Error::shape("forward model", "mask height", h, mask.height));
                }
                if mask.width != w {
                    return Err(Error::shape("forward model", "mask width", w, mask.width));
                }
            }
            ForwardModel::Denoise { .. } => {}
        }
        Ok((h, w))
    }

    /// Noise-free `A x` on a real image.
    pub fn apply_clean<T: Real>(&self, x: &NdArray<T>) -> Result<Measurement<T>> {
        self.check_image(x)?;
        Ok(match self {
            ForwardModel::Denoise { .. } => Measurement::Image(x.clone()),
            ForwardModel::Downsample { factor } => Measurement::Image(resample_blocks(x, *factor)),
            ForwardModel::Fourier { mask } => {
                let mut k = crate::numerics::fft::fft2_real(x)?;
                apply_mask(&mut k, mask);
                Measurement::KSpace(k)
            }
        })
    }

    /// `y = A x + noise`. Only the denoising task injects noise.
    pub fn apply<T: Real>(&self, x: &NdArray<T>, rng: &mut impl Rng) -> Result<Measurement<T>> {
        let clean = self.apply_clean(x)?;
        match (self, clean) {
            (ForwardModel::Denoise { sigma }, Measurement::Image(mut img)) if *sigma > 0.0 => {
                let normal =
                    Normal::new(0.0, *sigma).map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))?;
                for v in img.data_mut() {
                    *v += T::of(normal.sample(rng));
                }
                Ok(Measurement::Image(img))
            }
            (_, m) => Ok(m),
        }
    }

    /// Network input `[C, H, W]`: the inverse DFT split into real and
    /// imaginary channels for k-space, the measurement itself otherwise.
    pub fn zero_fill<T: Real>(&self, y: &Measurement<T>) -> Result<NdArray<T>> {
        match (self, y) {
            (ForwardModel::Fourier { .. }, Measurement::KSpace(k)) => {
                let img = ifft2(k)?;
                let (h, w) = (k.shape()[0], k.shape()[1]);
                let mut data = img.re.into_data();
                data.extend_from_slice(img.im.data());
                NdArray::new(&[2, h, w], data)
            }
            (ForwardModel::Fourier { .. }, _) => Err(Error::Config("k-space measurement expected".into())),
            (_, Measurement::Image(img)) => {
                let (h, w) = (img.shape()[0], img.shape()[1]);
                img.clone().reshape(&[1, h, w])
            }
            (_, Measurement::KSpace(_)) => Err(Error::Config("image-domain measurement expected".into())),
        }
    }

    /// Data-consistency loss `mean |A x - y|^2` recorded on the tape.
    ///
    /// `x` holds `H * W` values in any shape. The Fourier gradient is
    /// `2 Re{F^H (M (F x - y))} / N`.
    pub fn data_consistency<T: Real>(&self, tape: &mut Tape<T>, x: Var, y: &Measurement<T>) -> Result<Var> {
        let xv = tape.value(x);
        let (h, w) = match y.shape() {
            [h, w] => (*h, *w),
            s => return Err(Error::Rank { op: "data_consistency", expected: 2, got: s.len() }),
        };
        if xv.len() != h * w {
            return Err(Error::shape("data_consistency", "reconstruction size", h * w, xv.len()));
        }
        let image = xv.clone().reshape(&[h, w])?;
        let (value, residual) = self.residual(&image, y)?;
        let rule = DataConsistencyRule { model: self.clone(), residual, shape: xv.shape().to_vec() };
        Ok(tape.custom(&[x], NdArray::scalar(value), rule))
    }

    /// Plain-value data-consistency loss.
    pub fn data_consistency_value<T: Real>(&self, x: &NdArray<T>, y: &Measurement<T>) -> Result<T> {
        Ok(self.residual(x, y)?.0)
    }

    fn residual<T: Real>(&self, x: &NdArray<T>, y: &Measurement<T>) -> Result<(T, Measurement<T>)> {
        let ax = self.apply_clean(x)?;
        let n = T::from_usize(x.len()).unwrap();
        match (ax, y) {
            (Measurement::Image(a), Measurement::Image(b)) => {
                a.expect_same_shape("data_consistency", b)?;
                let r = a.zip_map(b, |p, q| p - q);
                Ok((r.sum_sq() / n, Measurement::Image(r)))
            }
            (Measurement::KSpace(a), Measurement::KSpace(b)) => {
                a.re.expect_same_shape("data_consistency", &b.re)?;
                let re = a.re.zip_map(&b.re, |p, q| p - q);
                let im = a.im.zip_map(&b.im, |p, q| p - q);
                let r = ComplexPair { re, im };
                Ok((r.norm_sq() / n, Measurement::KSpace(r)))
            }
            _ => Err(Error::Config("measurement kind does not match forward model".into())),
        }
    }
}

fn apply_mask<T: Real>(k: &mut ComplexPair<T>, mask: &Mask) {
    let w = mask.width;
    for i in 0..mask.height * w {
        if !mask.keeps(i / w, i % w) {
            k.re.data_mut()[i] = T::zero();
            k.im.data_mut()[i] = T::zero();
        }
    }
}

/// Block means of size `factor`, replicated back over each block (`U D x`).
fn resample_blocks<T: Real>(x: &NdArray<T>, factor: usize) -> NdArray<T> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let norm = T::from_usize(factor * factor).unwrap();
    let mut out = NdArray::zeros(&[h, w]);
    for by in 0..h / factor {
        for bx in 0..w / factor {
            let mut acc = T::zero();
            for y in by * factor..(by + 1) * factor {
                for xx in bx * factor..(bx + 1) * factor {
                    acc += x.data()[y * w + xx];
                }
            }
            let mean = acc / norm;
            for y in by * factor..(by + 1) * factor {
                for xx in bx * factor..(bx + 1) * factor {
                    out.data_mut()[y * w + xx] = mean;
                }
            }
        }
    }
    out
}

struct DataConsistencyRule<T> {
    model: ForwardModel,
    residual: Measurement<T>,
    shape: Vec<usize>,
}

impl<T: Real> BackwardRule<T> for DataConsistencyRule<T> {
    fn backward(&self, _: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let n = self.shape.iter().product::<usize>();
        let scale = g.item() * T::of(2.0) / T::from_usize(n).unwrap();
        let grad = match (&self.model, &self.residual) {
            (ForwardModel::Denoise { .. }, Measurement::Image(r)) => r.map(|v| v * scale),
            // U D is self-adjoint for block averaging
            (ForwardModel::Downsample { factor }, Measurement::Image(r)) => {
                resample_blocks(r, *factor).map(|v| v * scale)
            }
            (ForwardModel::Fourier { mask }, Measurement::KSpace(r)) => {
                let mut masked = r.clone();
                apply_mask(&mut masked, mask);
                ifft2(&masked).expect("validated in forward").re.map(|v| v * scale)
            }
            _ => unreachable!("residual kind follows the model"),
        };
        vec![Some(grad.reshape(&self.shape).expect("same length"))]
    }
}
