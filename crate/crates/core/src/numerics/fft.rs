//! Orthonormal 2-D discrete Fourier transform (radix-2).

use alloc::vec;
use alloc::vec::Vec;

use super::array::{ComplexPair, NdArray};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

/// In-place radix-2 transform of one complex line, unnormalized.
fn fft_line<T: Real>(re: &mut [T], im: &mut [T], dir: Direction, twiddles: &[(T, T)]) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = twiddles[k * step];
                let wi = if dir == Direction::Inverse { -wi } else { wi };
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// `exp(-2 pi i k / n)` for `k < n / 2`.
fn twiddles<T: Real>(n: usize) -> Vec<(T, T)> {
    let nf = T::from_usize(n).unwrap();
    (0..n / 2)
        .map(|k| {
            let angle = -T::TAU() * T::from_usize(k).unwrap() / nf;
            (angle.cos(), angle.sin())
        })
        .collect()
}

fn transform<T: Real>(x: &ComplexPair<T>, dir: Direction) -> Result<ComplexPair<T>> {
    x.re.expect_rank("fft2", 2)?;
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if !h.is_power_of_two() {
        return Err(Error::Config(alloc::format!("fft2: height {h} is not a power of two")));
    }
    if !w.is_power_of_two() {
        return Err(Error::Config(alloc::format!("fft2: width {w} is not a power of two")));
    }
    let mut re = x.re.clone();
    let mut im = x.im.clone();
    let tw_row = twiddles::<T>(w);
    {
        let (rd, id) = (re.data_mut(), im.data_mut());
        for r in 0..h {
            let span = r * w..(r + 1) * w;
            fft_line(&mut rd[span.clone()], &mut id[span], dir, &tw_row);
        }
    }
    let tw_col = if h == w { tw_row } else { twiddles::<T>(h) };
    let mut col_re = vec![T::zero(); h];
    let mut col_im = vec![T::zero(); h];
    let scale = T::one() / T::from_usize(h * w).unwrap().sqrt();
    let (rd, id) = (re.data_mut(), im.data_mut());
    for c in 0..w {
        for r in 0..h {
            col_re[r] = rd[r * w + c];
            col_im[r] = id[r * w + c];
        }
        fft_line(&mut col_re, &mut col_im, dir, &tw_col);
        for r in 0..h {
            rd[r * w + c] = col_re[r] * scale;
            id[r * w + c] = col_im[r] * scale;
        }
    }
    Ok(ComplexPair { re, im })
}

/// Forward 2-D DFT with `1/sqrt(HW)` scaling.
pub fn fft2<T: Real>(x: &ComplexPair<T>) -> Result<ComplexPair<T>> {
    transform(x, Direction::Forward)
}

/// Inverse 2-D DFT with `1/sqrt(HW)` scaling; the adjoint of [`fft2`].
pub fn ifft2<T: Real>(x: &ComplexPair<T>) -> Result<ComplexPair<T>> {
    transform(x, Direction::Inverse)
}

/// Forward transform of a real image.
pub fn fft2_real<T: Real>(x: &NdArray<T>) -> Result<ComplexPair<T>> {
    fft2(&ComplexPair::from_real(x.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(h: usize, w: usize, seed: u64) -> ComplexPair<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = NdArray::from_fn(&[h, w], |_| rng.gen_range(-1.0..1.0));
        let im = NdArray::from_fn(&[h, w], |_| rng.gen_range(-1.0..1.0));
        ComplexPair::new(re, im).unwrap()
    }

    /// O(N^2) reference DFT with the same orthonormal scaling.
    fn naive_dft(x: &ComplexPair<f64>) -> ComplexPair<f64> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let mut out = ComplexPair::zeros(&[h, w]);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let ang = -core::f64::consts::TAU * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        let (xr, xi) = (x.re.data()[r * w + c], x.im.data()[r * w + c]);
                        sr += xr * ang.cos() - xi * ang.sin();
                        si += xr * ang.sin() + xi * ang.cos();
                    }
                }
                out.re.data_mut()[u * w + v] = sr * scale;
                out.im.data_mut()[u * w + v] = si * scale;
            }
        }
        out
    }

    #[test]
    fn zeros_map_to_zeros() {
        let y = fft2(&ComplexPair::<f64>::zeros(&[4, 8])).unwrap();
        assert!(y.re.data().iter().chain(y.im.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut x = ComplexPair::<f64>::zeros(&[4, 4]);
        x.re.data_mut()[0] = 1.0;
        let y = fft2(&x).unwrap();
        let oracle = naive_dft(&x);
        for i in 0..16 {
            assert!((y.re.data()[i] - 0.25).abs() < 1e-15);
            assert!(y.im.data()[i].abs() < 1e-15);
            assert!((y.re.data()[i] - oracle.re.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_on_rectangular_grid() {
        let x = random_pair(4, 8, 3);
        let fast = fft2(&x).unwrap();
        let slow = naive_dft(&x);
        for i in 0..32 {
            assert!((fast.re.data()[i] - slow.re.data()[i]).abs() < 1e-12);
            assert!((fast.im.data()[i] - slow.im.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_and_parseval() {
        let x = random_pair(8, 8, 11);
        let y = fft2(&x).unwrap();
        let back = ifft2(&y).unwrap();
        for i in 0..64 {
            assert!((back.re.data()[i] - x.re.data()[i]).abs() < 1e-10);
            assert!((back.im.data()[i] - x.im.data()[i]).abs() < 1e-10);
        }
        assert!((y.norm_sq().sqrt() - x.norm_sq().sqrt()).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fft2(&ComplexPair::<f64>::zeros(&[6, 8])).is_err());
        assert!(ifft2(&ComplexPair::<f64>::zeros(&[8, 12])).is_err());
    }
}
