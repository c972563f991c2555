//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences and returns the maximum relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over all
/// coordinates.
///
/// `f` must build a scalar from its input and must record the same op
/// sequence for nearby inputs (no value-dependent graph structure). The
/// numeric side evaluates the recorded graph in f64 so the check is not
/// limited by f32 rounding.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.data().to_vec(), x.shape().to_vec(), true)?;
    let loss = f(&mut tape, xv)?;
    if tape.shape(loss).iter().product::<usize>() != 1 {
        return Err(Error::InvalidParameter(format!(
            "grad_check requires a scalar function, got output shape {:?}",
            tape.shape(loss)
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.or_zeros(xv, x.numel());

    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = tape.replay_f64(&[(xv, &probe)], loss)?;
        probe[i] = base[i] - h;
        let minus = tape.replay_f64(&[(xv, &probe)], loss)?;
        probe[i] = base[i];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i] as f64;
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
