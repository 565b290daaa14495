//! Finite-difference verification of tape gradients.

use super::{Precision, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference `(f(+h) − f(−h)) / 2h`, where `eval` receives the signed offset.
pub fn central_difference<F>(mut eval: F, step: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    let plus = eval(step)?;
    let minus = eval(-step)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Maximum relative error between the tape gradient of the scalar function
/// `f` at `x` and central differences, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::with_precision(Precision::F64);
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::NonScalar(tape.shape(y).to_vec()));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |point: &Tensor| -> Result<f64> {
        let mut t = Tape::no_grad(Precision::F64);
        let v = t.constant(point.clone());
        let out = f(&mut t, v)?;
        Ok(t.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    for &c in coords {
        if c >= x.numel() {
            return Err(Error::InvalidArgument(format!(
                "coordinate {c} out of range for {} elements",
                x.numel()
            )));
        }
        let numeric = central_difference(
            |delta| {
                let mut shifted = x.clone();
                shifted.data_mut()[c] += delta;
                eval(&shifted)
            },
            step,
        )?;
        worst = worst.max(relative_error(analytic[c], numeric));
    }
    Ok(worst)
}
