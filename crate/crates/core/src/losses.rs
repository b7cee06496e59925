//! Loss terms, the K-term combinators and matched loss-output scaling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, Measurement};
use crate::numerics::{BackwardRule, NdArray, Tape, Var};
use crate::scalar::Real;

/// Side length of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Smallest accepted best-case loss when calibrating scaling factors.
pub const MIN_SCALE: f64 = 1e-12;

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn plane_dims<T: Real>(op: &'static str, a: &NdArray<T>) -> Result<(usize, usize)> {
    if a.rank() < 2 {
        return Err(Error::Rank { op, expected: 2, got: a.rank() });
    }
    let r = a.rank();
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if h * w != a.len() {
        return Err(Error::shape(op, "leading dimensions", 1, a.len() / (h * w)));
    }
    Ok((h, w))
}

/// Mean absolute error against a fixed target.
pub fn mae<T: Real>(tape: &mut Tape<T>, x: Var, target: &NdArray<T>) -> Result<Var> {
    if tape.value(x).len() != target.len() {
        return Err(Error::shape("mae", "element count", target.len(), tape.value(x).len()));
    }
    let t = tape.constant(target.clone().reshape(tape.value(x).shape())?);
    let d = tape.sub(x, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps<T: Real>(size: usize, sigma: f64) -> Vec<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> =
        (0..size).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma))).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| T::of(v / total)).collect()
}

/// Separable valid-mode correlation: `[h, w] -> [h - k + 1, w - k + 1]`.
fn filter_valid<T: Real>(img: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(&a, &b)| a * b).sum();
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for (t, &g) in taps.iter().enumerate() {
            let src = &tmp[(y + t) * ow..(y + t + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += g * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint<T: Real>(g: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..oh {
        for (t, &c) in taps.iter().enumerate() {
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                *d += c * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (t, &c) in taps.iter().enumerate() {
                out[y * w + x + t] += c * v;
            }
        }
    }
    out
}

struct SsimStats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    s_xx: Vec<T>,
    s_yy: Vec<T>,
    s_xy: Vec<T>,
    taps: Vec<T>,
}

impl<T: Real> SsimStats<T> {
    fn compute(x: &[T], y: &[T], h: usize, w: usize) -> Result<Self> {
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            return Err(Error::Config(format!(
                "ssim: {SSIM_WINDOW}x{SSIM_WINDOW} window does not fit a {h}x{w} image"
            )));
        }
        let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
        Ok(Self {
            mu_x: filter_valid(x, h, w, &taps),
            mu_y: filter_valid(y, h, w, &taps),
            s_xx: filter_valid(&xx, h, w, &taps),
            s_yy: filter_valid(&yy, h, w, &taps),
            s_xy: filter_valid(&xy, h, w, &taps),
            taps,
        })
    }

    /// Local SSIM and its partial derivatives with respect to
    /// `(mu_x, s_xx, s_xy)` at one window position.
    fn local(&self, i: usize) -> (T, T, T, T) {
        let (c1, c2, two) = (T::of(SSIM_C1), T::of(SSIM_C2), T::of(2.0));
        let (mx, my) = (self.mu_x[i], self.mu_y[i]);
        let var_x = self.s_xx[i] - mx * mx;
        let var_y = self.s_yy[i] - my * my;
        let cov = self.s_xy[i] - mx * my;
        let a1 = two * mx * my + c1;
        let a2 = two * cov + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = var_x + var_y + c2;
        let s = (a1 * a2) / (b1 * b2);
        let d_mu = s * (two * my / a1 - two * my / a2 - two * mx / b1 + two * mx / b2);
        let d_sxx = -s / b2;
        let d_sxy = s * two / a2;
        (s, d_mu, d_sxx, d_sxy)
    }

    fn mean(&self) -> T {
        let n = self.mu_x.len();
        (0..n).map(|i| self.local(i).0).sum::<T>() / T::from_usize(n).unwrap()
    }
}

/// Mean SSIM over all positions where the window fits entirely.
pub fn ssim_value<T: Real>(x: &NdArray<T>, y: &NdArray<T>) -> Result<T> {
    let (h, w) = plane_dims("ssim", x)?;
    if x.len() != y.len() {
        return Err(Error::shape("ssim", "element count", x.len(), y.len()));
    }
    Ok(SsimStats::compute(x.data(), y.data(), h, w)?.mean())
}

struct SsimRule<T> {
    target: NdArray<T>,
    negate: bool,
}

impl<T: Real> BackwardRule<T> for SsimRule<T> {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let x = p[0];
        let (h, w) = plane_dims("ssim", x).expect("validated in forward");
        let stats = SsimStats::compute(x.data(), self.target.data(), h, w).expect("validated in forward");
        let n = stats.mu_x.len();
        let mut scale = g.item() / T::from_usize(n).unwrap();
        if self.negate {
            scale = -scale;
        }
        let mut g_mu = vec![T::zero(); n];
        let mut g_xx = vec![T::zero(); n];
        let mut g_xy = vec![T::zero(); n];
        for i in 0..n {
            let (_, d_mu, d_sxx, d_sxy) = stats.local(i);
            g_mu[i] = d_mu * scale;
            g_xx[i] = d_sxx * scale;
            g_xy[i] = d_sxy * scale;
        }
        let a_mu = filter_valid_adjoint(&g_mu, h, w, &stats.taps);
        let a_xx = filter_valid_adjoint(&g_xx, h, w, &stats.taps);
        let a_xy = filter_valid_adjoint(&g_xy, h, w, &stats.taps);
        let two = T::of(2.0);
        let grad =
            NdArray::from_fn(x.shape(), |i| a_mu[i] + two * x.data()[i] * a_xx[i] + self.target.data()[i] * a_xy[i]);
        vec![Some(grad)]
    }
}

fn ssim_op<T: Real>(tape: &mut Tape<T>, x: Var, target: &NdArray<T>, negate: bool) -> Result<Var> {
    let xv = tape.value(x);
    let s = ssim_value(xv, target)?;
    let value = if negate { T::one() - s } else { s };
    let rule = SsimRule { target: target.clone().reshape(xv.shape())?, negate };
    Ok(tape.custom(&[x], NdArray::scalar(value), rule))
}

/// Mean SSIM of `x` against a fixed target (11x11 Gaussian window,
/// sigma 1.5, dynamic range 1).
pub fn ssim<T: Real>(tape: &mut Tape<T>, x: Var, target: &NdArray<T>) -> Result<Var> {
    ssim_op(tape, x, target, false)
}

/// `1 - SSIM`, the minimized form.
pub fn ssim_loss<T: Real>(tape: &mut Tape<T>, x: Var, target: &NdArray<T>) -> Result<Var> {
    ssim_op(tape, x, target, true)
}

/// Anisotropic total variation with forward differences and no wraparound.
pub fn tv_value<T: Real>(x: &NdArray<T>) -> Result<T> {
    let (h, w) = plane_dims("tv", x)?;
    let d = x.data();
    let mut acc = T::zero();
    for r in 0..h {
        for c in 0..w {
            let v = d[r * w + c];
            if r + 1 < h {
                acc += (d[(r + 1) * w + c] - v).abs();
            }
            if c + 1 < w {
                acc += (d[r * w + c + 1] - v).abs();
            }
        }
    }
    Ok(acc)
}

struct TvRule;

impl<T: Real> BackwardRule<T> for TvRule {
    fn backward(&self, p: &[&NdArray<T>], _: &NdArray<T>, g: &NdArray<T>, _: &[bool]) -> Vec<Option<NdArray<T>>> {
        let x = p[0];
        let (h, w) = plane_dims("tv", x).expect("validated in forward");
        let d = x.data();
        let scale = g.item();
        let mut grad = NdArray::zeros(x.shape());
        let gd = grad.data_mut();
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if r + 1 < h {
                    let s = sign(d[i + w] - d[i]) * scale;
                    gd[i + w] += s;
                    gd[i] -= s;
                }
                if c + 1 < w {
                    let s = sign(d[i + 1] - d[i]) * scale;
                    gd[i + 1] += s;
                    gd[i] -= s;
                }
            }
        }
        vec![Some(grad)]
    }
}

pub fn tv<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let value = tv_value(tape.value(x))?;
    Ok(tape.custom(&[x], NdArray::scalar(value), TvRule))
}

/// Sum over layers of the l1 norm of each layer's parameters.
pub fn l1_weights<T: Real>(tape: &mut Tape<T>, layers: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &layer in layers {
        let a = tape.abs(layer);
        let s = tape.sum(a);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Empty("l1_weights: no layers".into()))
}

/// `(1 - lambda) * L1 + lambda * L2`.
pub fn combine2<T: Real>(lambda: T, l1: T, l2: T) -> T {
    (T::one() - lambda) * l1 + lambda * l2
}

/// `lambda1 * L1 + (1 - lambda1) * lambda2 * L2 + (1 - lambda1) * (1 - lambda2) * L3`.
pub fn combine3<T: Real>(lambda1: T, lambda2: T, l1: T, l2: T, l3: T) -> T {
    let rest = T::one() - lambda1;
    lambda1 * l1 + rest * lambda2 * l2 + rest * (T::one() - lambda2) * l3
}

/// Mixing coefficients of the combinator for `K = lambda.len() + 1` terms.
pub fn combinator_weights<T: Real>(lambda: &[T]) -> Result<Vec<T>> {
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
    let one = T::one();
    match *lambda {
        [l] => Ok(vec![one - l, l]),
        [l1, l2] => Ok(vec![l1, (one - l1) * l2, (one - l1) * (one - l2)]),
        _ => {
            Err(Error::Config(format!("combinators exist for 2 or 3 loss terms, got {} hyperparameters", lambda.len())))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Supervised learning against ground truth.
    Sl,
    /// Amortized optimization of a regularized data-consistency objective.
    Ao,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Mae,
    /// Enters the objective as `1 - SSIM`.
    Ssim,
    /// Data consistency `mean |A x - y|^2`.
    Dc,
    /// Layer-wise l1 penalty on the generated weights.
    L1Weights,
    /// Anisotropic total variation of the reconstruction.
    Tv,
}

impl LossTerm {
    pub fn needs_target(self) -> bool {
        matches!(self, LossTerm::Mae | LossTerm::Ssim)
    }
}

/// Ordered loss terms with per-term scaling factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub mode: LossMode,
    pub terms: Vec<LossTerm>,
    pub alphas: Vec<f64>,
}

impl LossSpec {
    /// MAE and SSIM with the given scaling factors.
    pub fn supervised(alphas: [f64; 2]) -> Self {
        Self { mode: LossMode::Sl, terms: vec![LossTerm::Mae, LossTerm::Ssim], alphas: alphas.to_vec() }
    }

    /// Data consistency, weight l1 and TV with the given scaling factors.
    pub fn amortized(alphas: [f64; 3]) -> Self {
        Self {
            mode: LossMode::Ao,
            terms: vec![LossTerm::Dc, LossTerm::L1Weights, LossTerm::Tv],
            alphas: alphas.to_vec(),
        }
    }

    /// Default amortized scaling for a main network with `params`
    /// parameters on a grid of `pixels` pixels.
    pub fn amortized_default(params: usize, pixels: usize) -> Self {
        Self::amortized([1.0, 1e-6 / params as f64, 1e-3 / pixels as f64])
    }

    /// Number of loss terms `K`.
    pub fn arity(&self) -> usize {
        self.terms.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.terms.len()) {
            return Err(Error::Config(format!("expected 2 or 3 loss terms, got {}", self.terms.len())));
        }
        if self.alphas.len() != self.terms.len() {
            return Err(Error::Config(format!(
                "{} scaling factors for {} loss terms",
                self.alphas.len(),
                self.terms.len()
            )));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!("scaling factor {a} must be positive")));
        }
        let supervised = self.terms.iter().all(|t| t.needs_target());
        match self.mode {
            LossMode::Sl if !supervised => Err(Error::Config("supervised mode takes MAE/SSIM terms".into())),
            LossMode::Ao if self.terms.iter().any(|t| t.needs_target()) => {
                Err(Error::Config("amortized mode cannot use ground-truth terms".into()))
            }
            _ => Ok(()),
        }
    }

    /// Final per-term weights `alpha_i * c_i(lambda)`.
    pub fn coefficients<T: Real>(&self, lambda: &[T]) -> Result<Vec<T>> {
        if lambda.len() + 1 != self.arity() {
            return Err(Error::shape("LossSpec::coefficients", "lambda length", self.arity() - 1, lambda.len()));
        }
        let mut w = combinator_weights(lambda)?;
        for (c, &a) in w.iter_mut().zip(&self.alphas) {
            *c *= T::of(a);
        }
        Ok(w)
    }

    /// Records every term on the tape, in order.
    pub fn terms_on_tape<T: Real>(&self, tape: &mut Tape<T>, ctx: &LossContext<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.terms
            .iter()
            .map(|term| match term {
                LossTerm::Mae => mae(tape, x, ctx.require_target()?),
                LossTerm::Ssim => ssim_loss(tape, x, ctx.require_target()?),
                LossTerm::Dc => ctx.forward.data_consistency(tape, x, ctx.measurement),
                LossTerm::L1Weights => l1_weights(tape, ctx.weights),
                LossTerm::Tv => tv(tape, x),
            })
            .collect()
    }

    /// Scalar `sum_i coefficient_i * term_i` on the tape.
    pub fn combine_on_tape<T: Real>(&self, tape: &mut Tape<T>, terms: &[Var], lambda: &[T]) -> Result<Var> {
        let coefs = self.coefficients(lambda)?;
        let mut total: Option<Var> = None;
        for (&t, c) in terms.iter().zip(coefs) {
            let scaled = tape.scale(t, c);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        total.ok_or_else(|| Error::Empty("no loss terms".into()))
    }

    /// Combined loss from precomputed term values.
    pub fn combine_values<T: Real>(&self, terms: &[T], lambda: &[T]) -> Result<T> {
        Ok(self.coefficients(lambda)?.iter().zip(terms).map(|(&c, &t)| c * t).sum())
    }
}

/// What the loss terms are evaluated against.
pub struct LossContext<'a, T> {
    pub target: Option<&'a NdArray<T>>,
    pub forward: &'a ForwardModel,
    pub measurement: &'a Measurement<T>,
    /// Main-network parameter leaves, for the weight penalty.
    pub weights: &'a [Var],
}

impl<T: Real> LossContext<'_, T> {
    fn require_target(&self) -> Result<&NdArray<T>> {
        self.target.ok_or_else(|| Error::Config("supervised loss term needs a ground-truth image".into()))
    }
}

/// Best-case validation losses `s_i`; the scaling factors are `1 / s_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    pub best_losses: Vec<f64>,
}

impl ScalingFactors {
    pub fn from_validation_losses(best_losses: &[f64]) -> Result<Self> {
        for (i, &s) in best_losses.iter().enumerate() {
            if !s.is_finite() || s <= MIN_SCALE {
                return Err(Error::Degenerate(format!(
                    "loss term {i} reaches {s:e} on validation; a degenerate term cannot be normalized"
                )));
            }
        }
        Ok(Self { best_losses: best_losses.to_vec() })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.best_losses.iter().map(|s| 1.0 / s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> NdArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NdArray::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn mae_values() {
        let x = random_image(4, 4, 1);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let m = mae(&mut t, v, &x).unwrap();
        assert_eq!(t.value(m).item(), 0.0);
        let z = t.leaf(NdArray::zeros(&[4, 4]));
        let m = mae(&mut t, z, &NdArray::ones(&[4, 4])).unwrap();
        assert_eq!(t.value(m).item(), 1.0);
        let shifted = x.map(|v| v + 0.3);
        let m = mae(&mut t, v, &shifted).unwrap();
        assert!((t.value(m).item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mae_gradient_away_from_ties() {
        let target = random_image(8, 8, 2);
        let x = target.map(|v| v + if v > 0.5 { 0.2 } else { -0.2 });
        let err = gradcheck(|t, v| mae(t, v, &target), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let x = random_image(16, 16, 3);
        assert!((ssim_value(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        for (m1, m2) in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0)] {
            let a = NdArray::full(&[16, 16], m1);
            let b = NdArray::full(&[16, 16], m2);
            let expected = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
            assert!((ssim_value(&a, &b).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_window_must_fit() {
        let x = random_image(10, 16, 4);
        assert!(ssim_value(&x, &x).is_err());
    }

    #[test]
    fn ssim_gradients() {
        let target = random_image(16, 16, 5);
        let x = random_image(16, 16, 6);
        // edge pixels carry tiny window weights, so smaller steps hit rounding
        let err = gradcheck(|t, v| ssim(t, v, &target), &x, 1e-4).unwrap();
        assert!(err < 1e-5, "ssim {err}");
        let err = gradcheck(|t, v| ssim_loss(t, v, &target), &x, 1e-4).unwrap();
        assert!(err < 1e-5, "1-ssim {err}");
    }

    #[test]
    fn filter_adjoint_identity() {
        let a = random_image(14, 13, 7);
        let g = random_image(4, 3, 8);
        let taps = gaussian_taps::<f64>(SSIM_WINDOW, SSIM_SIGMA);
        let fa = filter_valid(a.data(), 14, 13, &taps);
        let ag = filter_valid_adjoint(g.data(), 14, 13, &taps);
        let lhs: f64 = fa.iter().zip(g.data()).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.data().iter().zip(&ag).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn tv_values_and_gradient() {
        assert_eq!(tv_value(&NdArray::<f64>::full(&[5, 5], 0.4)).unwrap(), 0.0);
        let x = NdArray::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tv_value(&x).unwrap(), 2.0);
        // distinct values keep every difference off zero
        let x = NdArray::from_fn(&[8, 8], |i| ((i * 7919) % 64) as f64 / 64.0 + 0.001 * i as f64);
        // the quadratic keeps gradients where neighbour signs cancel off zero
        let err = gradcheck(
            |t, v| {
                let a = tv(t, v)?;
                let sq = t.mul(v, v)?;
                let q = t.sum(sq);
                t.add(a, q)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn l1_weight_penalty() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(NdArray::zeros(&[3]));
        let v = l1_weights(&mut t, &[a]).unwrap();
        assert_eq!(t.value(v).item(), 0.0);
        let b = t.leaf(NdArray::new(&[2], vec![1.0, -2.0]).unwrap());
        let v = l1_weights(&mut t, &[b]).unwrap();
        assert_eq!(t.value(v).item(), 3.0);
        let g = t.backward(v).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[1.0, -1.0]);

        let theta = NdArray::new(&[4], vec![0.5, -0.25, 0.01, -1.5]).unwrap();
        let err = gradcheck(|t, v| l1_weights(t, &[v]), &theta, 1e-6).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn combinator_examples() {
        assert_eq!(combine2(0.0, 2.0, 4.0), 2.0);
        assert_eq!(combine2(1.0, 2.0, 4.0), 4.0);
        assert_eq!(combine2(0.5, 2.0, 4.0), 3.0);
        assert_eq!(combine3(1.0, 0.3, 1.0, 2.0, 3.0), 1.0);
        assert_eq!(combine3(0.0, 1.0, 1.0, 2.0, 3.0), 2.0);
        assert_eq!(combine3(0.0, 0.0, 1.0, 2.0, 3.0), 3.0);
    }

    #[test]
    fn combinator_weights_reject_out_of_range() {
        assert!(combinator_weights(&[1.5f64]).is_err());
        assert!(combinator_weights(&[0.5f64, -0.1]).is_err());
        assert!(combinator_weights(&[0.5f64, 0.5, 0.5]).is_err());
    }

    #[test]
    fn spec_validation() {
        LossSpec::supervised([1.0, 1.0]).validate().unwrap();
        LossSpec::amortized_default(1000, 4096).validate().unwrap();
        assert!(LossSpec::supervised([1.0, 0.0]).validate().is_err());
        let mut mixed = LossSpec::amortized([1.0, 1.0, 1.0]);
        mixed.terms[0] = LossTerm::Mae;
        assert!(mixed.validate().is_err());
        assert!(LossSpec::supervised([1.0, 1.0]).coefficients(&[0.1f64, 0.2]).is_err());
    }

    #[test]
    fn combined_loss_gradient() {
        let target = random_image(16, 16, 9);
        let spec = LossSpec::supervised([2.0, 3.0]);
        let forward = ForwardModel::Denoise { sigma: 0.0 };
        let y = Measurement::Image(target.clone());
        let x = random_image(16, 16, 10);
        let err = gradcheck(
            |t, v| {
                let ctx = LossContext { target: Some(&target), forward: &forward, measurement: &y, weights: &[] };
                let terms = spec.terms_on_tape(t, &ctx, v)?;
                spec.combine_on_tape(t, &terms, &[0.3])
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn scaling_guard_and_alphas() {
        let s = ScalingFactors::from_validation_losses(&[0.05, 0.2]).unwrap();
        let a = s.alphas();
        assert!((a[0] * 0.05 - 1.0).abs() < 1e-15 && (a[1] * 0.2 - 1.0).abs() < 1e-15);
        assert!(ScalingFactors::from_validation_losses(&[1e-13, 0.2]).is_err());
        assert!(ScalingFactors::from_validation_losses(&[0.0, 0.2]).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]

        #[test]
        fn combine2_is_affine(lambda in 0.0f64..=1.0, l1 in -10.0f64..10.0, l2 in -10.0f64..10.0) {
            let at0 = combine2(0.0, l1, l2);
            let at1 = combine2(1.0, l1, l2);
            let direct = combine2(lambda, l1, l2);
            let affine = (1.0 - lambda) * at0 + lambda * at1;
            proptest::prop_assert_eq!(direct, affine);
        }

        #[test]
        fn combine3_weights_are_convex(l1 in 0.0f64..=1.0, l2 in 0.0f64..=1.0) {
            let w = combinator_weights(&[l1, l2]).unwrap();
            proptest::prop_assert!(w.iter().all(|&c| c >= 0.0));
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn one_minus_ssim_is_nonnegative(seed in 0u64..1000) {
            let a = random_image(12, 12, seed);
            let b = random_image(12, 12, seed + 1);
            proptest::prop_assert!(1.0 - ssim_value(&a, &b).unwrap() >= -1e-6);
        }
    }
}
