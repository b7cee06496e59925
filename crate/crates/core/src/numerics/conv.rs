//! Raw kernels behind the spatial tape ops. Convolution goes through
//! im2col and a GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::array::NdArray;
use crate::error::{Error, Result};
use crate::scalar::Real;

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

impl ConvDims {
    fn cols(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn out_px(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn conv_dims<T: Real>(input: &NdArray<T>, kernel: &NdArray<T>, padding: usize) -> Result<ConvDims> {
    input.expect_rank("conv2d", 4)?;
    kernel.expect_rank("conv2d", 4)?;
    let s = input.shape();
    let ks = kernel.shape();
    if ks[1] != s[1] {
        return Err(Error::shape("conv2d", "kernel input channels", s[1], ks[1]));
    }
    if ks[2] != ks[3] {
        return Err(Error::shape("conv2d", "kernel width", ks[2], ks[3]));
    }
    let k = ks[2];
    if k.is_multiple_of(2) {
        return Err(Error::Config(alloc::format!("conv2d: kernel size {k} must be odd")));
    }
    if s[2] + 2 * padding < k {
        return Err(Error::shape("conv2d", "padded input height", k, s[2] + 2 * padding));
    }
    if s[3] + 2 * padding < k {
        return Err(Error::shape("conv2d", "padded input width", k, s[3] + 2 * padding));
    }
    Ok(ConvDims {
        batch: s[0],
        cin: s[1],
        h: s[2],
        w: s[3],
        cout: ks[0],
        k,
        oh: s[2] + 2 * padding - k + 1,
        ow: s[3] + 2 * padding - k + 1,
        pad: padding,
    })
}

/// Valid output columns `[lo, hi)` for kernel tap `kx`.
fn tap_range(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

fn im2col<T: Real>(img: &[T], d: &ConvDims, cols: &mut [T]) {
    let px = d.out_px();
    cols.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..d.cin {
        let plane = &img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * px..(row + 1) * px];
                let (lo, hi) = tap_range(kx, d.pad, d.w, d.ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.oh {
                    let iy = oy + ky;
                    if iy < d.pad || iy - d.pad >= d.h {
                        continue;
                    }
                    let iy = iy - d.pad;
                    let src = &plane[iy * d.w + lo + kx - d.pad..iy * d.w + hi + kx - d.pad];
                    dst[oy * d.ow + lo..oy * d.ow + hi].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, img: &mut [T]) {
    let px = d.out_px();
    for ci in 0..d.cin {
        let plane = &mut img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let src = &cols[row * px..(row + 1) * px];
                let (lo, hi) = tap_range(kx, d.pad, d.w, d.ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.oh {
                    let iy = oy + ky;
                    if iy < d.pad || iy - d.pad >= d.h {
                        continue;
                    }
                    let iy = iy - d.pad;
                    let dst = &mut plane[iy * d.w + lo + kx - d.pad..iy * d.w + hi + kx - d.pad];
                    for (o, &v) in dst.iter_mut().zip(&src[oy * d.ow + lo..oy * d.ow + hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &NdArray<T>,
    kernel: &NdArray<T>,
    bias: &NdArray<T>,
    padding: usize,
) -> Result<NdArray<T>> {
    let d = conv_dims(input, kernel, padding)?;
    if bias.len() != d.cout {
        return Err(Error::shape("conv2d", "bias length", d.cout, bias.len()));
    }
    let px = d.out_px();
    let ncols = d.cols();
    let in_len = d.cin * d.h * d.w;
    let mut out = NdArray::zeros(&[d.batch, d.cout, d.oh, d.ow]);
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); ncols * px] };
    for b in 0..d.batch {
        let img = &input.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out.data_mut()[b * d.cout * px..(b + 1) * d.cout * px];
        for (co, chunk) in dst.chunks_mut(px).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias.data()[co]);
        }
        let src: &[T] = if d.is_pointwise() {
            img
        } else {
            im2col(img, &d, &mut cols);
            &cols
        };
        T::gemm(
            d.cout,
            ncols,
            px,
            T::one(),
            kernel.data(),
            (ncols as isize, 1),
            src,
            (px as isize, 1),
            T::one(),
            dst,
            (px as isize, 1),
        );
    }
    Ok(out)
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &NdArray<T>,
    kernel: &NdArray<T>,
    grad: &NdArray<T>,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> (Option<NdArray<T>>, Option<NdArray<T>>) {
    let d = conv_dims(input, kernel, padding).expect("validated in forward");
    let px = d.out_px();
    let ncols = d.cols();
    let in_len = d.cin * d.h * d.w;
    let mut gin = need_input.then(|| NdArray::zeros(input.shape()));
    let mut gk = need_kernel.then(|| NdArray::zeros(kernel.shape()));
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); ncols * px] };
    let mut dcols = if need_input && !d.is_pointwise() { vec![T::zero(); ncols * px] } else { Vec::new() };
    for b in 0..d.batch {
        let g = &grad.data()[b * d.cout * px..(b + 1) * d.cout * px];
        let img = &input.data()[b * in_len..(b + 1) * in_len];
        if let Some(gk) = gk.as_mut() {
            let src: &[T] = if d.is_pointwise() {
                img
            } else {
                im2col(img, &d, &mut cols);
                &cols
            };
            // dK += G [cout, px] * cols^T [px, ncols]
            T::gemm(
                d.cout,
                px,
                ncols,
                T::one(),
                g,
                (px as isize, 1),
                src,
                (1, px as isize),
                T::one(),
                gk.data_mut(),
                (ncols as isize, 1),
            );
        }
        if let Some(gin) = gin.as_mut() {
            let dst = &mut gin.data_mut()[b * in_len..(b + 1) * in_len];
            if d.is_pointwise() {
                T::gemm(
                    ncols,
                    d.cout,
                    px,
                    T::one(),
                    kernel.data(),
                    (1, ncols as isize),
                    g,
                    (px as isize, 1),
                    T::zero(),
                    dst,
                    (px as isize, 1),
                );
            } else {
                // dcols = K^T [ncols, cout] * G [cout, px]
                T::gemm(
                    ncols,
                    d.cout,
                    px,
                    T::one(),
                    kernel.data(),
                    (1, ncols as isize),
                    g,
                    (px as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (px as isize, 1),
                );
                col2im(&dcols, &d, dst);
            }
        }
    }
    (gin, gk)
}

pub(crate) fn bias_grad<T: Real>(grad: &NdArray<T>) -> NdArray<T> {
    let s = grad.shape();
    let (batch, cout, px) = (s[0], s[1], s[2] * s[3]);
    let mut out = NdArray::zeros(&[cout]);
    for b in 0..batch {
        for co in 0..cout {
            let start = (b * cout + co) * px;
            out.data_mut()[co] += grad.data()[start..start + px].iter().copied().sum::<T>();
        }
    }
    out
}

fn split_planes(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    (shape[..r - 2].iter().product(), h, w)
}

pub(crate) fn avgpool2<T: Real>(x: &NdArray<T>) -> Result<NdArray<T>> {
    if x.rank() < 2 {
        return Err(Error::Rank { op: "avgpool2", expected: 2, got: x.rank() });
    }
    let (planes, h, w) = split_planes(x.shape());
    if h % 2 != 0 {
        return Err(Error::shape("avgpool2", "height parity", h + 1, h));
    }
    if w % 2 != 0 {
        return Err(Error::shape("avgpool2", "width parity", w + 1, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let quarter = T::of(0.25);
    let mut out = NdArray::zeros(&shape);
    let src = x.data();
    for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate().take(planes) {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i = base + 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2<T: Real>(x: &NdArray<T>) -> NdArray<T> {
    let (planes, h, w) = split_planes(x.shape());
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    let mut out = NdArray::zeros(&shape);
    let ow = 2 * w;
    for (p, dst) in out.data_mut().chunks_mut(4 * h * w).enumerate().take(planes) {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`].
pub(crate) fn block_sum2<T: Real>(g: &NdArray<T>) -> NdArray<T> {
    let (planes, h, w) = split_planes(g.shape());
    let (oh, ow) = (h / 2, w / 2);
    let mut shape = g.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let mut out = NdArray::zeros(&shape);
    for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate().take(planes) {
        let src = &g.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / 2) * ow + xx / 2] += src[y * w + xx];
            }
        }
    }
    out
}

pub(crate) fn concat_channels<T: Real>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    a.expect_rank("concat_channels", 4)?;
    b.expect_rank("concat_channels", 4)?;
    let (sa, sb) = (a.shape(), b.shape());
    for (i, dim) in [(0, "batch"), (2, "height"), (3, "width")] {
        if sa[i] != sb[i] {
            return Err(Error::shape("concat_channels", dim, sa[i], sb[i]));
        }
    }
    let px = sa[2] * sa[3];
    let (ca, cb) = (sa[1] * px, sb[1] * px);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa[0] {
        data.extend_from_slice(&a.data()[n * ca..(n + 1) * ca]);
        data.extend_from_slice(&b.data()[n * cb..(n + 1) * cb]);
    }
    NdArray::new(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], data)
}

pub(crate) fn split_channels<T: Real>(g: &NdArray<T>, split: usize) -> (NdArray<T>, NdArray<T>) {
    let s = g.shape();
    let px = s[2] * s[3];
    let (ca, cb) = (split * px, (s[1] - split) * px);
    let mut a = Vec::with_capacity(s[0] * ca);
    let mut b = Vec::with_capacity(s[0] * cb);
    for n in 0..s[0] {
        let base = n * (ca + cb);
        a.extend_from_slice(&g.data()[base..base + ca]);
        b.extend_from_slice(&g.data()[base + ca..base + ca + cb]);
    }
    (NdArray::new(&[s[0], split, s[2], s[3]], a).unwrap(), NdArray::new(&[s[0], s[1] - split, s[2], s[3]], b).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple-loop correlation.
    fn naive(input: &NdArray<f64>, kernel: &NdArray<f64>, bias: &[f64], pad: usize) -> NdArray<f64> {
        let s = input.shape();
        let ks = kernel.shape();
        let k = ks[2];
        let (oh, ow) = (s[2] + 2 * pad - k + 1, s[3] + 2 * pad - k + 1);
        let mut out = NdArray::zeros(&[s[0], ks[0], oh, ow]);
        for b in 0..s[0] {
            for co in 0..ks[0] {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..s[1] {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = x as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s[2] as isize || ix >= s[3] as isize {
                                        continue;
                                    }
                                    let iv = input.data()[((b * s[1] + ci) * s[2] + iy as usize) * s[3] + ix as usize];
                                    let kv = kernel.data()[((co * s[1] + ci) * k + ky) * k + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out.data_mut()[((b * ks[0] + co) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_correlation() {
        let input = NdArray::from_fn(&[2, 3, 6, 5], |i| ((i * 37 % 17) as f64 - 8.0) / 7.0);
        for (k, pad) in [(3, 1), (5, 2), (3, 0), (1, 0)] {
            let kernel = NdArray::from_fn(&[4, 3, k, k], |i| ((i * 13 % 11) as f64 - 5.0) / 9.0);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&input, &kernel, &NdArray::new(&[4], bias.to_vec()).unwrap(), pad).unwrap();
            let slow = naive(&input, &kernel, &bias, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} pad={pad}");
            }
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let x = NdArray::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let y = NdArray::from_fn(&[1, 2, 2, 2], |i| (i as f64) * 0.5 - 1.0);
        let lhs: f64 = avgpool2(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let up = upsample2(&y);
        let rhs: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>() * 0.25;
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
