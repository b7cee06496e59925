//! Image-quality metrics, lambda sweeps, landscapes and diverse-pair
//! selection.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ssim_value;
use crate::numerics::NdArray;
use crate::scalar::Real;
use crate::training::{lambda_grid, Dataset, Model, Sample};

/// PSNR reported when the mean squared error falls below [`MSE_FLOOR`].
pub const PSNR_CAP: f64 = 100.0;
pub const MSE_FLOOR: f64 = 1e-10;

pub const LOG_SIZE: usize = 15;
pub const LOG_SIGMA: f64 = 1.5;

/// Non-uniform per-axis lambda values of the fixed-lambda baseline grid.
pub const BASELINE_AXIS: [f64; 18] =
    [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.93, 0.95, 0.98, 0.99, 0.995, 0.999, 1.0];

fn as_f64<T: Real>(x: &NdArray<T>) -> Vec<f64> {
    x.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

fn check_pair<T: Real>(op: &'static str, a: &NdArray<T>, b: &NdArray<T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, "element count", b.len(), a.len()));
    }
    Ok(())
}

pub fn mse<T: Real>(xhat: &NdArray<T>, x: &NdArray<T>) -> Result<f64> {
    check_pair("mse", xhat, x)?;
    let (a, b) = (as_f64(xhat), as_f64(x));
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / MSE)` for peak value 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(xhat: &NdArray<T>, x: &NdArray<T>) -> Result<f64> {
    let m = mse(xhat, x)?;
    Ok(if m < MSE_FLOOR { PSNR_CAP } else { -10.0 * libm::log10(m) })
}

/// PSNR gain over the zero-filled reconstruction.
pub fn rpsnr<T: Real>(xhat: &NdArray<T>, x: &NdArray<T>, zero_filled: &NdArray<T>) -> Result<f64> {
    Ok(psnr(xhat, x)? - psnr(zero_filled, x)?)
}

pub fn mae<T: Real>(xhat: &NdArray<T>, x: &NdArray<T>) -> Result<f64> {
    check_pair("mae", xhat, x)?;
    let (a, b) = (as_f64(xhat), as_f64(x));
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// Zero-mean Laplacian-of-Gaussian kernel, `size x size`, row-major.
pub fn log_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let s2 = sigma * sigma;
    let r2: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            x * x + y * y
        })
        .collect();
    let g: Vec<f64> = r2.iter().map(|r| libm::exp(-r / (2.0 * s2))).collect();
    let total: f64 = g.iter().sum();
    let h: Vec<f64> = g.iter().zip(&r2).map(|(g, r)| g / total * (r - 2.0 * s2) / (s2 * s2)).collect();
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.iter().map(|v| v - mean).collect()
}

/// Valid-region filtering of an `[H, W]` image with the 15x15 LoG kernel.
pub fn log_filter<T: Real>(x: &NdArray<T>) -> Result<NdArray<f64>> {
    x.expect_rank("log_filter", 2)?;
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if h < LOG_SIZE || w < LOG_SIZE {
        return Err(Error::Config(format!("LoG filter needs at least {LOG_SIZE}x{LOG_SIZE}, got {h}x{w}")));
    }
    let k = log_kernel(LOG_SIZE, LOG_SIGMA);
    let d = as_f64(x);
    let (oh, ow) = (h - LOG_SIZE + 1, w - LOG_SIZE + 1);
    Ok(NdArray::from_fn(&[oh, ow], |i| {
        let (r, c) = (i / ow, i % ow);
        let mut acc = 0.0;
        for ky in 0..LOG_SIZE {
            let row = &d[(r + ky) * w + c..(r + ky) * w + c + LOG_SIZE];
            acc += row.iter().zip(&k[ky * LOG_SIZE..(ky + 1) * LOG_SIZE]).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }))
}

/// High-frequency error norm: l2 distance between LoG-filtered images.
pub fn hfen<T: Real>(xhat: &NdArray<T>, x: &NdArray<T>) -> Result<f64> {
    xhat.expect_same_shape("hfen", x)?;
    let (a, b) = (log_filter(xhat)?, log_filter(x)?);
    Ok(libm::sqrt(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Rpsnr,
    Ssim,
    /// Negative MAE, so larger is better like the others.
    Nmae,
    /// Negative HFEN.
    Nhfen,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Psnr, Metric::Rpsnr, Metric::Ssim, Metric::Nmae, Metric::Nhfen];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Rpsnr => "rpsnr",
            Metric::Ssim => "ssim",
            Metric::Nmae => "nmae",
            Metric::Nhfen => "nhfen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }

    /// Metric of a `[H, W]` reconstruction of `sample`.
    pub fn evaluate<T: Real>(self, xhat: &NdArray<T>, sample: &Sample<T>) -> Result<f64> {
        let x = sample
            .target
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs a ground-truth image", self.name())))?;
        match self {
            Metric::Psnr => psnr(xhat, x),
            Metric::Rpsnr => rpsnr(xhat, x, &sample.zero_filled()?),
            Metric::Ssim => Ok(ssim_value(xhat, x)?.to_f64().unwrap_or(f64::NAN)),
            Metric::Nmae => Ok(-mae(xhat, x)?),
            Metric::Nhfen => Ok(-hfen(xhat, x)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub psnr: f64,
    pub rpsnr: f64,
    pub ssim: f64,
    pub nmae: f64,
    pub nhfen: f64,
}

impl MetricValues {
    pub fn compute<T: Real>(xhat: &NdArray<T>, sample: &Sample<T>) -> Result<Self> {
        Ok(Self {
            psnr: Metric::Psnr.evaluate(xhat, sample)?,
            rpsnr: Metric::Rpsnr.evaluate(xhat, sample)?,
            ssim: Metric::Ssim.evaluate(xhat, sample)?,
            nmae: Metric::Nmae.evaluate(xhat, sample)?,
            nhfen: Metric::Nhfen.evaluate(xhat, sample)?,
        })
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Psnr => self.psnr,
            Metric::Rpsnr => self.rpsnr,
            Metric::Ssim => self.ssim,
            Metric::Nmae => self.nmae,
            Metric::Nhfen => self.nhfen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lambda: Vec<f64>,
    pub per_image: Vec<MetricValues>,
    pub mean: MetricValues,
}

fn lambda_t<T: Real>(lambda: &[f64]) -> Vec<T> {
    lambda.iter().map(|&v| T::of(v)).collect()
}

/// All metrics of `model` at `lambda` over a dataset.
pub fn evaluate<T: Real>(model: &Model<T>, lambda: &[f64], data: &Dataset<T>) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let theta = model.generate(&lambda_t::<T>(lambda))?;
    let per_image = data
        .samples
        .iter()
        .map(|s| MetricValues::compute(&theta.reconstruct(&s.input)?, s))
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let avg = |m: Metric| per_image.iter().map(|v| v.get(m)).sum::<f64>() / n;
    let mean = MetricValues {
        psnr: avg(Metric::Psnr),
        rpsnr: avg(Metric::Rpsnr),
        ssim: avg(Metric::Ssim),
        nmae: avg(Metric::Nmae),
        nhfen: avg(Metric::Nhfen),
    };
    Ok(MetricReport { lambda: lambda.to_vec(), per_image, mean })
}

/// Mean of one metric over the dataset at `lambda`.
pub fn mean_metric<T: Real>(model: &Model<T>, lambda: &[f64], data: &Dataset<T>, metric: Metric) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let theta = model.generate(&lambda_t::<T>(lambda))?;
    let mut total = 0.0;
    for s in &data.samples {
        total += metric.evaluate(&theta.reconstruct(&s.input)?, s)?;
    }
    Ok(total / data.len() as f64)
}

/// `n` evenly spaced values over `[0, 1]`; a single value sits at 0.
pub fn unit_axis(n: usize) -> Vec<f64> {
    lambda_grid(1, n).into_iter().map(|p| p[0]).collect()
}

/// A metric along the single hyperparameter axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub metric: Metric,
    pub axis: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn metric_curve<T: Real>(model: &Model<T>, data: &Dataset<T>, metric: Metric, n: usize) -> Result<Curve> {
    if model.lambda_dim() != 1 {
        return Err(Error::Config(format!(
            "curves need a two-term model, this one takes {} hyperparameters",
            model.lambda_dim()
        )));
    }
    if n == 0 {
        return Err(Error::Config("curve needs at least one point".into()));
    }
    let axis = unit_axis(n);
    let values = axis.iter().map(|&l| mean_metric(model, &[l], data, metric)).collect::<Result<Vec<_>>>()?;
    Ok(Curve { metric, axis, values })
}

/// A metric over the two-hyperparameter square. `values[i][j]` holds the
/// value at `lambda1 = x_axis[j]`, `lambda2 = y_axis[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub metric: Metric,
    pub x_axis: Vec<f64>,
    pub y_axis: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// `[row, column]` of the largest value.
    pub argmax: [usize; 2],
}

impl Landscape {
    pub fn new(metric: Metric, x_axis: Vec<f64>, y_axis: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let argmax = argmax(&values)?;
        Ok(Self { metric, x_axis, y_axis, values, argmax })
    }

    /// `[lambda1, lambda2]` at the argmax.
    pub fn argmax_lambda(&self) -> [f64; 2] {
        [self.x_axis[self.argmax[1]], self.y_axis[self.argmax[0]]]
    }
}

/// Row-major position of the first largest entry.
pub fn argmax(grid: &[Vec<f64>]) -> Result<[usize; 2]> {
    let mut best: Option<([usize; 2], f64)> = None;
    for (i, row) in grid.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::NonFinite(format!("grid value at ({i}, {j})")));
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(([i, j], v));
            }
        }
    }
    best.map(|(p, _)| p).ok_or_else(|| Error::Empty("argmax of an empty grid".into()))
}

pub fn landscape<T: Real>(model: &Model<T>, data: &Dataset<T>, metric: Metric, n: usize) -> Result<Landscape> {
    if model.lambda_dim() != 2 {
        return Err(Error::Config(format!(
            "landscapes need a three-term model, this one takes {} hyperparameter(s)",
            model.lambda_dim()
        )));
    }
    if n == 0 {
        return Err(Error::Config("landscape needs at least one point per axis".into()));
    }
    let axis = unit_axis(n);
    let values = axis
        .iter()
        .map(|&l2| axis.iter().map(|&l1| mean_metric(model, &[l1, l2], data, metric)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Landscape::new(metric, axis.clone(), axis, values)
}

fn bracket(axis: &[f64], v: f64) -> (usize, f64) {
    if axis.len() == 1 {
        return (0, 0.0);
    }
    let hi = axis.partition_point(|&a| a < v).clamp(1, axis.len() - 1);
    let lo = hi - 1;
    let t = ((v - axis[lo]) / (axis[hi] - axis[lo])).clamp(0.0, 1.0);
    (lo, t)
}

/// Bilinear resampling of `grid` (rows over `y_src`, columns over `x_src`,
/// both increasing) onto new axes; points outside are clamped.
pub fn bilinear_resample(
    x_src: &[f64],
    y_src: &[f64],
    grid: &[Vec<f64>],
    x_dst: &[f64],
    y_dst: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if grid.len() != y_src.len() || grid.iter().any(|r| r.len() != x_src.len()) || x_src.is_empty() {
        return Err(Error::shape(
            "bilinear_resample",
            "grid",
            y_src.len() * x_src.len(),
            grid.iter().map(Vec::len).sum(),
        ));
    }
    Ok(y_dst
        .iter()
        .map(|&y| {
            let (r, ty) = bracket(y_src, y);
            let r1 = (r + 1).min(y_src.len() - 1);
            x_dst
                .iter()
                .map(|&x| {
                    let (c, tx) = bracket(x_src, x);
                    let c1 = (c + 1).min(x_src.len() - 1);
                    let top = grid[r][c] * (1.0 - tx) + grid[r][c1] * tx;
                    let bottom = grid[r1][c] * (1.0 - tx) + grid[r1][c1] * tx;
                    top * (1.0 - ty) + bottom * ty
                })
                .collect()
        })
        .collect())
}

/// Linear-interpolation percentile (`0..=100`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::OutOfRange { field: "percentile".into(), value: p, lo: 0.0, hi: 100.0 });
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Survivors and chosen pair of the diverse-pair procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct DiverseSelection {
    pub threshold: f64,
    pub survivors: Vec<usize>,
    pub pair: (usize, usize),
    pub distance: f64,
}

/// Keeps candidates scoring at least the `p`-th percentile and returns the
/// survivor pair with the largest l2 distance, the first such pair in
/// index order on ties.
pub fn select_diverse<T: Real>(scores: &[f64], images: &[NdArray<T>], p: f64) -> Result<DiverseSelection> {
    if scores.len() != images.len() {
        return Err(Error::shape("diverse_pair", "image count", scores.len(), images.len()));
    }
    let threshold = percentile(scores, p)?;
    let survivors: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= threshold).collect();
    if survivors.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} candidate(s) reach the {p}th percentile; a pair needs two",
            survivors.len()
        )));
    }
    let mut best = ((survivors[0], survivors[1]), f64::NEG_INFINITY);
    for (a, &i) in survivors.iter().enumerate() {
        for &j in &survivors[a + 1..] {
            let d = mse(&images[i], &images[j])? * images[i].len() as f64;
            if d > best.1 {
                best = ((i, j), d);
            }
        }
    }
    Ok(DiverseSelection { threshold, survivors, pair: best.0, distance: libm::sqrt(best.1) })
}

/// Two maximally different good reconstructions of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversePair<T> {
    pub lambda_a: Vec<f64>,
    pub lambda_b: Vec<f64>,
    pub image_a: NdArray<T>,
    pub image_b: NdArray<T>,
    pub score_a: f64,
    pub score_b: f64,
    pub threshold: f64,
    pub distance: f64,
    /// Candidates were ranked by PSNR (true) or by negative data
    /// consistency when no ground truth was available.
    pub by_psnr: bool,
}

/// Samples `n` points per hyperparameter axis, filters by PSNR (or by data
/// consistency without ground truth) at percentile `p` and picks the most
/// distant surviving pair.
pub fn diverse_pair<T: Real>(
    model: &Model<T>,
    forward: &crate::forward::ForwardModel,
    sample: &Sample<T>,
    n: usize,
    p: f64,
) -> Result<DiversePair<T>> {
    if n == 0 {
        return Err(Error::Config("diverse pair needs at least one point per axis".into()));
    }
    let lambdas = lambda_grid(model.lambda_dim(), n);
    let mut images = Vec::with_capacity(lambdas.len());
    let mut scores = Vec::with_capacity(lambdas.len());
    for l in &lambdas {
        let xhat = model.reconstruct(&lambda_t::<T>(l), &sample.input)?;
        scores.push(match &sample.target {
            Some(x) => psnr(&xhat, x)?,
            None => -forward.data_consistency_value(&xhat, &sample.measurement)?.to_f64().unwrap_or(f64::NAN),
        });
        images.push(xhat);
    }
    let sel = select_diverse(&scores, &images, p)?;
    let (a, b) = sel.pair;
    Ok(DiversePair {
        lambda_a: lambdas[a].clone(),
        lambda_b: lambdas[b].clone(),
        image_a: images[a].clone(),
        image_b: images[b].clone(),
        score_a: scores[a],
        score_b: scores[b],
        threshold: sel.threshold,
        distance: sel.distance,
        by_psnr: sample.target.is_some(),
    })
}
