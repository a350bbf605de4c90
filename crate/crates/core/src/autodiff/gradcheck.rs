//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|)
/// for a scalar-valued function of one tensor.
pub fn grad_check<S, F>(f: F, point: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&Tape<S>, Var) -> Result<Var>,
{
    if eps <= S::zero() {
        return Err(Error::contract("grad_check requires eps > 0"));
    }

    let eval = |t: &Tensor<S>| -> Result<S> {
        let tape = Tape::new();
        let x = tape.leaf(t.clone());
        let out = f(&tape, x)?;
        let v = tape.item(out)?;
        if !v.is_finite() {
            return Err(Error::numeric("grad_check: non-finite function value"));
        }
        Ok(v)
    };

    // Analytic gradient.
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&tape, x)?;
    let loss = tape.item(out)?;
    if !loss.is_finite() {
        return Err(Error::numeric("grad_check: non-finite function value"));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let two = S::of(2.0);
    let mut worst = S::zero();
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (two * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() {
            return Err(Error::numeric("grad_check: non-finite finite difference"));
        }
        let rel = (a - numeric).abs() / S::one().max(a.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
