//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor5;

/// Denominator floor in the relative error.
const REL_FLOOR: f64 = 1e-8;

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if !value.shape().is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().0));
    }
    let x = value.item();
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(x)
}

/// Compares the gradient of `f` at `point` with central differences
/// `(f(x+eps) − f(x−eps)) / 2eps`, coordinate by coordinate, and returns the
/// worst relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor5<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.variable(point.clone());
        let loss = f(&tape, x)?;
        scalar_of(&tape, loss)?;
        let grads = tape.backward(loss)?;
        grads
            .wrt(x)
            .cloned()
            .unwrap_or_else(|| Tensor5::zeros(point.shape()))
    };
    if !analytic.is_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let eval = |p: Tensor5<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        let loss = f(&tape, x)?;
        scalar_of(&tape, loss)
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
