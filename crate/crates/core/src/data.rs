//! Synthetic ellipse phantoms, image preparation and dataset splitting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NdArray;

pub const PHANTOM_SIZE: usize = 64;

/// One ellipse in normalized coordinates, where the image spans `[-1, 1]`
/// on both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = (c * dx + s * dy) / self.axes[0];
        let v = (-s * dx + c * dy) / self.axes[1];
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// `[size, size]`, values in `[0, 1]`.
    pub image: NdArray<f64>,
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
}

/// A single phantom: 3 to 8 random ellipses summed and clipped to `[0, 1]`,
/// smoothed by a 3x3 box blur and min-max normalized.
pub fn gen_phantom(size: usize, seed: u64) -> Result<Phantom> {
    if size < 2 {
        return Err(Error::Config(format!("phantom size {size} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(3..=8);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| Ellipse {
            center: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)],
            axes: [rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6)],
            angle: rng.gen_range(0.0..core::f64::consts::PI),
            intensity: rng.gen_range(0.1..1.0),
        })
        .collect();
    let coord = |i: usize| 2.0 * (i as f64 + 0.5) / size as f64 - 1.0;
    let raw = NdArray::from_fn(&[size, size], |i| {
        let (x, y) = (coord(i % size), coord(i / size));
        let v: f64 = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
        v.clamp(0.0, 1.0)
    });
    let image = min_max_normalize(&box_blur3(&raw));
    Ok(Phantom { image, seed, ellipses })
}

/// `count` phantoms whose individual seeds are drawn from `seed`.
pub fn gen_phantoms(count: usize, size: usize, seed: u64) -> Result<Vec<Phantom>> {
    if count == 0 {
        return Err(Error::Empty("gen_phantoms: count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_phantom(size, rng.gen())).collect()
}

/// 3x3 mean filter with edge replication.
fn box_blur3(x: &NdArray<f64>) -> NdArray<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    NdArray::from_fn(&[h, w], |i| {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        let mut acc = 0.0;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let rr = (r + dr).clamp(0, h as isize - 1) as usize;
                let cc = (c + dc).clamp(0, w as isize - 1) as usize;
                acc += d[rr * w + cc];
            }
        }
        acc / 9.0
    })
}

/// Rescales to `[0, 1]`; a flat image maps to zeros.
pub fn min_max_normalize(x: &NdArray<f64>) -> NdArray<f64> {
    let (lo, hi) = x.min_max();
    if hi - lo <= 0.0 || !(hi - lo).is_finite() {
        return NdArray::zeros(x.shape());
    }
    x.map(|v| (v - lo) / (hi - lo))
}

/// Center-crops a row-major grayscale image to a square, resamples it to
/// `size x size` by nearest neighbour and min-max normalizes it. The flag
/// reports a flat (degenerate) image.
pub fn prepare_image(pixels: &[f64], height: usize, width: usize, size: usize) -> Result<(NdArray<f64>, bool)> {
    if pixels.len() != height * width {
        return Err(Error::shape("prepare_image", "pixel count", height * width, pixels.len()));
    }
    if height == 0 || width == 0 || size == 0 {
        return Err(Error::Empty("prepare_image: empty image".into()));
    }
    let side = height.min(width);
    let (top, left) = ((height - side) / 2, (width - side) / 2);
    let resampled = NdArray::from_fn(&[size, size], |i| {
        let (r, c) = (i / size, i % size);
        let sr = top + (r * side) / size;
        let sc = left + (c * side) / size;
        pixels[sr * width + sc]
    });
    let (lo, hi) = resampled.min_max();
    Ok((min_max_normalize(&resampled), hi <= lo))
}

/// Relative sizes of the train, validation and test partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 100.0 / 175.0, val: 25.0 / 175.0, test: 50.0 / 175.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..pool` partitioned by `ratios`.
pub fn split(pool: usize, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {}, expected 1", r.iter().sum::<f64>())));
    }
    let mut idx: Vec<usize> = (0..pool).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = libm::round(pool as f64 * ratios.train) as usize;
    let n_val = (libm::round(pool as f64 * ratios.val) as usize).min(pool - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(DatasetSplit { train: idx, val, test })
}

/// Recipe for the phantom pool and its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub pool: usize,
    pub size: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub ratios: SplitRatios,
    /// Directory of real images to use instead of phantoms. File access
    /// lives outside this crate, so `generate` rejects it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub import_dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        // 256 / 64 / 128 under the default ratios
        Self { pool: 448, size: PHANTOM_SIZE, seed: 0, split_seed: 1, ratios: SplitRatios::default(), import_dir: None }
    }
}

/// Train, validation and test images.
#[derive(Debug, Clone)]
pub struct SplitImages {
    pub train: Vec<NdArray<f64>>,
    pub val: Vec<NdArray<f64>>,
    pub test: Vec<NdArray<f64>>,
}

impl DataConfig {
    pub fn generate(&self) -> Result<SplitImages> {
        if let Some(dir) = &self.import_dir {
            return Err(Error::Config(format!("images come from {dir}; load them with the file-aware companion")));
        }
        let pool = gen_phantoms(self.pool, self.size, self.seed)?;
        self.split_pool(pool.into_iter().map(|p| p.image).collect())
    }

    /// Partitions an image pool by `ratios` and `split_seed`.
    pub fn split_pool(&self, pool: Vec<NdArray<f64>>) -> Result<SplitImages> {
        let s = split(pool.len(), self.ratios, self.split_seed)?;
        let pick = |ids: &[usize]| ids.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
        Ok(SplitImages { train: pick(&s.train), val: pick(&s.val), test: pick(&s.test) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn phantoms_are_seeded_and_in_range() {
        let a = gen_phantoms(5, 32, 7).unwrap();
        let b = gen_phantoms(5, 32, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].image, a[1].image);
        for p in &a {
            assert!((3..=8).contains(&p.ellipses.len()));
        }
        assert!(gen_phantoms(0, 32, 7).is_err());
    }

    #[test]
    fn phantom_statistics() {
        let ps = gen_phantoms(1000, PHANTOM_SIZE, 3).unwrap();
        let mut total = 0.0;
        for p in &ps {
            let (lo, hi) = p.image.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
            total += p.image.mean();
        }
        let mean = total / ps.len() as f64;
        assert!((0.1..=0.6).contains(&mean), "mean intensity {mean}");
    }

    #[test]
    fn flat_image_prepares_to_zeros() {
        let (img, flat) = prepare_image(&vec![0.7; 100], 10, 10, 4).unwrap();
        assert!(flat);
        assert_eq!(img, NdArray::zeros(&[4, 4]));
    }

    #[test]
    fn prepare_crops_and_resamples() {
        let (h, w) = (128, 160);
        let px: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 + (i / w) as f64 * 1000.0).collect();
        let (img, flat) = prepare_image(&px, h, w, 64).unwrap();
        assert!(!flat);
        assert_eq!(img.shape(), &[64, 64]);
        let (lo, hi) = img.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        // top-left output pixel comes from the crop origin (row 0, column 16)
        let (raw, _) = prepare_image(&px, h, w, 128).unwrap();
        assert_eq!(raw.data()[0], 0.0);
        assert!(prepare_image(&px[1..], h, w, 64).is_err());
    }

    #[test]
    fn split_properties() {
        let all = split(10, SplitRatios { train: 1.0, val: 0.0, test: 0.0 }, 3).unwrap();
        assert_eq!(all.train.len(), 10);
        assert!(all.val.is_empty() && all.test.is_empty());
        for seed in 0..100 {
            let s = split(175, SplitRatios::default(), seed).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (100, 25, 50));
            let mut seen = vec![false; 175];
            for &i in s.train.iter().chain(&s.val).chain(&s.test) {
                assert!(!seen[i]);
                seen[i] = true;
            }
            assert!(seen.iter().all(|&b| b));
        }
        assert_eq!(split(50, SplitRatios::default(), 4).unwrap(), split(50, SplitRatios::default(), 4).unwrap());
        assert!(split(10, SplitRatios { train: 0.5, val: 0.2, test: 0.2 }, 0).is_err());
    }

    #[test]
    fn default_pool_sizes() {
        let s = split(448, SplitRatios::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (256, 64, 128));
    }
}
