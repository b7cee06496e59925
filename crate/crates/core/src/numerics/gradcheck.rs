//! Central finite-difference gradient checking.

use super::array::NdArray;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// central differences with step `eps`:
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn gradcheck<T, F>(f: F, x: &NdArray<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |point: &NdArray<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::shape("gradcheck", "output length", 1, value.len()));
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.take(v).unwrap_or_else(|| NdArray::zeros(x.shape()));
    if !tape.value(out).all_finite() || !analytic.all_finite() {
        return Err(Error::NonFinite("gradcheck: analytic evaluation".into()));
    }

    let floor = T::of(1e-12);
    let two = T::of(2.0);
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(alloc::format!("gradcheck: coordinate {i}")));
        }
        let fd = (plus - minus) / (two * eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (a.abs() + fd.abs() + floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
