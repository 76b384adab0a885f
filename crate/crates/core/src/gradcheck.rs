//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::optim::Parameter;

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks `p.grad` against central differences of `f`, returning the max
/// relative error over all coordinates.
pub fn finite_diff_grad_check(p: &mut Parameter, f: impl Fn(&Parameter) -> f64, h: f64) -> Result<f64> {
    let analytic = p.grad.data().to_vec();
    check_coordinates(p, |p| p.value.data_mut(), &analytic, |p| f(p), h)
}

/// General form: `coords` exposes the perturbed coordinates of `model`,
/// `analytic` holds their gradient, `f` evaluates the scalar loss.
pub fn check_coordinates<M>(
    model: &mut M,
    coords: impl Fn(&mut M) -> &mut [f64],
    analytic: &[f64],
    f: impl Fn(&M) -> f64,
    h: f64,
) -> Result<f64> {
    let n = coords(model).len();
    if analytic.len() != n {
        return Err(Error::shape("check_coordinates", &[n], &[analytic.len()]));
    }
    let base = f(model);
    if base.to_bits() != f(model).to_bits() {
        return Err(Error::Contract("loss function is not deterministic".into()));
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = coords(model)[i];
        coords(model)[i] = orig + h;
        let plus = f(model);
        coords(model)[i] = orig - h;
        let minus = f(model);
        coords(model)[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
