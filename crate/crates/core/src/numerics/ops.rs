//! Differentiable operations recorded on a [`Tape`].

use alloc::vec;
use alloc::vec::Vec;

use super::array::NdArray;
use super::conv;
use super::tape::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

struct AddRule;
impl<T: Real> BackwardRule<T> for AddRule {
    fn backward(&self, _: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, needs: &[bool]) -> Vec<Option<NdArray<T>>> {
        needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

struct SubRule;
impl<T: Real> BackwardRule<T> for SubRule {
    fn backward(&self, _: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, needs: &[bool]) -> Vec<Option<NdArray<T>>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
    }
}

struct MulRule;
impl<T: Real> BackwardRule<T> for MulRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, needs: &[bool]) -> Vec<Option<NdArray<T>>> {
        vec![needs[0].then(|| g.zip_map(p[1], |a, b| a * b)), needs[1].then(|| g.zip_map(p[0], |a, b| a * b))]
    }
}

struct ScaleRule<T>(T);
impl<T: Real> BackwardRule<T> for ScaleRule<T> {
    fn backward(&self, _: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let c = self.0;
        vec![Some(g.map(|v| v * c))]
    }
}

struct AbsRule;
impl<T: Real> BackwardRule<T> for AbsRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        vec![Some(g.zip_map(p[0], |a, x| a * sign(x)))]
    }
}

struct SumRule {
    scale_by_len: bool,
}
impl<T: Real> BackwardRule<T> for SumRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let mut v = g.item();
        if self.scale_by_len {
            v /= T::from_usize(p[0].len()).unwrap();
        }
        vec![Some(NdArray::full(p[0].shape(), v))]
    }
}

struct LeakyReluRule<T>(T);
impl<T: Real> BackwardRule<T> for LeakyReluRule<T> {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let slope = self.0;
        vec![Some(g.zip_map(p[0], |a, x| if x > T::zero() { a } else { a * slope }))]
    }
}

struct ReshapeRule;
impl<T: Real> BackwardRule<T> for ReshapeRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        vec![Some(g.clone().reshape(p[0].shape()).expect("reshape grad"))]
    }
}

struct SliceRule {
    start: usize,
}
impl<T: Real> BackwardRule<T> for SliceRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let mut out = NdArray::zeros(p[0].shape());
        out.data_mut()[self.start..self.start + g.len()].copy_from_slice(g.data());
        vec![Some(out)]
    }
}

/// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
struct LinearRule;
impl<T: Real> BackwardRule<T> for LinearRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, needs: &[bool]) -> Vec<Option<NdArray<T>>> {
        let (x, w) = (p[0], p[1]);
        let (n, fan_in) = (x.shape()[0], x.shape()[1]);
        let fan_out = w.shape()[0];
        let gx = needs[0].then(|| {
            let mut out = NdArray::zeros(x.shape());
            T::gemm(
                n,
                fan_out,
                fan_in,
                T::one(),
                g.data(),
                (fan_out as isize, 1),
                w.data(),
                (fan_in as isize, 1),
                T::zero(),
                out.data_mut(),
                (fan_in as isize, 1),
            );
            out
        });
        let gw = needs[1].then(|| {
            let mut out = NdArray::zeros(w.shape());
            T::gemm(
                fan_out,
                n,
                fan_in,
                T::one(),
                g.data(),
                (1, fan_out as isize),
                x.data(),
                (fan_in as isize, 1),
                T::zero(),
                out.data_mut(),
                (fan_in as isize, 1),
            );
            out
        });
        let gb = needs[2].then(|| {
            let mut out = NdArray::zeros(&[fan_out]);
            for row in g.data().chunks(fan_out) {
                for (o, &v) in out.data_mut().iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        });
        vec![gx, gw, gb]
    }
}

struct Conv2dRule {
    padding: usize,
}
impl<T: Real> BackwardRule<T> for Conv2dRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, needs: &[bool]) -> Vec<Option<NdArray<T>>> {
        let grads = conv::conv2d_backward(p[0], p[1], g, self.padding, needs[0], needs[1]);
        let gb = needs[2].then(|| conv::bias_grad(g));
        vec![grads.0, grads.1, gb]
    }
}

struct AvgPool2Rule;
impl<T: Real> BackwardRule<T> for AvgPool2Rule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let quarter = T::of(0.25);
        let mut up = conv::upsample2(g);
        up.data_mut().iter_mut().for_each(|v| *v *= quarter);
        debug_assert_eq!(up.shape(), p[0].shape());
        vec![Some(up)]
    }
}

struct Upsample2Rule;
impl<T: Real> BackwardRule<T> for Upsample2Rule {
    fn backward(&self, _: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        vec![Some(conv::block_sum2(g))]
    }
}

struct ConcatRule {
    split: usize,
}
impl<T: Real> BackwardRule<T> for ConcatRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, needs: &[bool]) -> Vec<Option<NdArray<T>>> {
        let (a, b) = conv::split_channels(g, self.split);
        debug_assert_eq!(a.shape(), p[0].shape());
        vec![needs[0].then_some(a), needs[1].then_some(b)]
    }
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(op, self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(&[a, b], v, AddRule))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.custom(&[a, b], v, SubRule))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.custom(&[a, b], v, MulRule))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.custom(&[a], v, ScaleRule(c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.custom(&[a], v, AbsRule)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = NdArray::scalar(self.value(a).sum());
        self.custom(&[a], v, SumRule { scale_by_len: false })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = NdArray::scalar(self.value(a).mean());
        self.custom(&[a], v, SumRule { scale_by_len: true })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.custom(&[a], v, LeakyReluRule(slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.custom(&[a], v, ReshapeRule))
    }

    /// Contiguous run of `a`'s row-major data starting at `start`, viewed as `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let len: usize = shape.iter().product();
        if start + len > av.len() {
            return Err(Error::shape("slice", "source length", start + len, av.len()));
        }
        let v = NdArray::new(shape, av.data()[start..start + len].to_vec())?;
        Ok(self.custom(&[a], v, SliceRule { start }))
    }

    /// Fully connected layer: `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        xv.expect_rank("linear", 2)?;
        wv.expect_rank("linear", 2)?;
        let (n, fan_in) = (xv.shape()[0], xv.shape()[1]);
        let fan_out = wv.shape()[0];
        if wv.shape()[1] != fan_in {
            return Err(Error::shape("linear", "weight input width", fan_in, wv.shape()[1]));
        }
        if bv.len() != fan_out {
            return Err(Error::shape("linear", "bias length", fan_out, bv.len()));
        }
        let mut out = NdArray::zeros(&[n, fan_out]);
        for row in out.data_mut().chunks_mut(fan_out) {
            row.copy_from_slice(bv.data());
        }
        T::gemm(
            n,
            fan_in,
            fan_out,
            T::one(),
            xv.data(),
            (fan_in as isize, 1),
            wv.data(),
            (1, fan_in as isize),
            T::one(),
            out.data_mut(),
            (fan_out as isize, 1),
        );
        Ok(self.custom(&[x, w, b], out, LinearRule))
    }

    /// Zero-padded cross-correlation with stride 1.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), padding)?;
        Ok(self.custom(&[input, kernel, bias], out, Conv2dRule { padding }))
    }

    pub fn avgpool2(&mut self, a: Var) -> Result<Var> {
        let v = conv::avgpool2(self.value(a))?;
        Ok(self.custom(&[a], v, AvgPool2Rule))
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() < 2 {
            return Err(Error::Rank { op: "upsample2", expected: 2, got: v.rank() });
        }
        let v = conv::upsample2(v);
        Ok(self.custom(&[a], v, Upsample2Rule))
    }

    /// Concatenates two `[B, C, H, W]` arrays along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = conv::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).shape()[1];
        Ok(self.custom(&[a, b], v, ConcatRule { split }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> NdArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep away from the kinks of abs / leaky_relu
        NdArray::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(NdArray::scalar(-1.0));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).item(), -0.01);
    }

    #[test]
    fn upsample_nearest() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(NdArray::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.upsample2(x).unwrap();
        let expected = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        assert_eq!(t.value(y).shape(), &[4, 4]);
        assert_eq!(t.value(y).data(), &expected);
    }

    #[test]
    fn conv_identity_scale_and_constant_bias() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(NdArray::ones(&[1, 1, 3, 3]));
        let k = t.leaf(NdArray::full(&[1, 1, 1, 1], 2.0));
        let b = t.leaf(NdArray::zeros(&[1]));
        let y = t.conv2d(x, k, b, 0).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 2.0));

        let x = t.leaf(random(&[2, 3, 5, 5], 1));
        let k = t.leaf(NdArray::zeros(&[4, 3, 3, 3]));
        let b = t.leaf(NdArray::full(&[4], 0.7));
        let y = t.conv2d(x, k, b, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 4, 5, 5]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(NdArray::ones(&[1, 2, 4, 4]));
        let k = t.leaf(NdArray::ones(&[1, 3, 3, 3]));
        let b = t.leaf(NdArray::zeros(&[1]));
        let err = t.conv2d(x, k, b, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { dim: "kernel input channels", .. }), "{err}");
        let k = t.leaf(NdArray::ones(&[2, 2, 3, 3]));
        let err = t.conv2d(x, k, b, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { dim: "bias length", .. }), "{err}");
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let input = random(&[1, 1, 5, 5], 2);
        let kernel = random(&[1, 1, 3, 3], 3);
        let err = gradcheck(
            |t, k| {
                let x = t.constant(input.clone());
                let b = t.constant(NdArray::zeros(&[1]));
                let y = t.conv2d(x, k, b, 1)?;
                Ok(t.sum(y))
            },
            &kernel,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn conv_input_and_bias_gradients() {
        let kernel = random(&[3, 2, 3, 3], 4);
        let weights = random(&[2, 3, 4, 4], 5);
        let err = gradcheck(
            |t, x| {
                let k = t.constant(kernel.clone());
                let b = t.constant(NdArray::zeros(&[3]));
                let y = t.conv2d(x, k, b, 1)?;
                let y = t.reshape(y, &[2, 3, 4, 4])?;
                let w = t.constant(weights.clone());
                let z = t.mul(y, w)?;
                Ok(t.sum(z))
            },
            &random(&[2, 2, 4, 4], 6),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input rel err {err}");
        let err = gradcheck(
            |t, b| {
                let x = t.constant(random(&[1, 2, 4, 4], 7));
                let k = t.constant(kernel.clone());
                let y = t.conv2d(x, k, b, 1)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &random(&[3], 8),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bias rel err {err}");
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let other = random(&[4, 4], 10);
        let cases: Vec<(&str, fn(&mut Tape<f64>, Var, Var) -> Result<Var>)> = vec![
            ("add", |t, x, o| {
                let y = t.add(x, o)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            ("sub", |t, x, o| {
                let y = t.sub(o, x)?;
                let y = t.mul(y, y)?;
                Ok(t.mean(y))
            }),
            ("mul", |t, x, o| {
                let y = t.mul(x, o)?;
                let y = t.mul(y, x)?;
                Ok(t.sum(y))
            }),
            ("abs", |t, x, o| {
                let y = t.abs(x);
                let y = t.mul(y, o)?;
                Ok(t.sum(y))
            }),
            ("scale", |t, x, o| {
                let y = t.scale(x, 3.5);
                let y = t.mul(y, o)?;
                Ok(t.mean(y))
            }),
            ("leaky_relu", |t, x, o| {
                let y = t.leaky_relu(x, 0.01);
                let y = t.mul(y, o)?;
                Ok(t.sum(y))
            }),
            ("relu", |t, x, o| {
                let y = t.relu(x);
                let y = t.mul(y, o)?;
                Ok(t.sum(y))
            }),
            ("avgpool2", |t, x, _| {
                let y = t.avgpool2(x)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            ("upsample2", |t, x, _| {
                let y = t.upsample2(x)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            ("linear", |t, x, o| {
                let b = t.constant(NdArray::full(&[4], 0.3));
                let y = t.linear(x, o, b)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            ("linear_weight", |t, x, o| {
                let b = t.constant(NdArray::full(&[4], -0.2));
                let y = t.linear(o, x, b)?;
                let y = t.mul(y, y)?;
                Ok(t.mean(y))
            }),
        ];
        for (name, f) in cases {
            let o = other.clone();
            let err = gradcheck(
                move |t, x| {
                    let ov = t.constant(o.clone());
                    f(t, x, ov)
                },
                &random(&[4, 4], 11),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn slice_values_and_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(NdArray::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = t.slice(x, 2, &[3]).unwrap();
        assert_eq!(t.value(s).data(), &[3., 4., 5.]);
        assert!(t.slice(x, 4, &[3]).is_err());
        let w = random(&[2, 2], 15);
        let err = gradcheck(
            |t, x| {
                let s = t.slice(x, 1, &[2, 2])?;
                let wv = t.constant(w.clone());
                let y = t.mul(s, wv)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &random(&[6], 16),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn concat_gradient() {
        let other = random(&[1, 2, 4, 4], 12);
        let w = random(&[1, 3, 4, 4], 13);
        let err = gradcheck(
            |t, x| {
                let o = t.constant(other.clone());
                let c = t.concat_channels(x, o)?;
                let wv = t.constant(w.clone());
                let y = t.mul(c, wv)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &random(&[1, 1, 4, 4], 14),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let x0 = random(&[3, 3], 20);
        let grad_of = |double: bool| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(x0.clone());
            let sq = t.mul(x, x).unwrap();
            let g = t.sum(sq);
            let out = if double { t.add(g, g).unwrap() } else { g };
            t.backward(out).unwrap().get(x).unwrap().clone()
        };
        let single = grad_of(false);
        let double = grad_of(true);
        for (a, b) in single.data().iter().zip(double.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(NdArray::zeros(&[2, 2]));
        let b = t.leaf(NdArray::zeros(&[2, 3]));
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
        let odd = t.leaf(NdArray::zeros(&[1, 1, 3, 3]));
        assert!(t.avgpool2(odd).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let run = || {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(random(&[1, 2, 8, 8], 30));
            let k = t.leaf(random(&[3, 2, 3, 3], 31));
            let b = t.leaf(random(&[3], 32));
            let y = t.conv2d(x, k, b, 1).unwrap();
            let y = t.leaky_relu(y, 0.01);
            let s = t.sum(y);
            let g = t.backward(s).unwrap();
            (t.value(s).item(), g.get(k).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}
