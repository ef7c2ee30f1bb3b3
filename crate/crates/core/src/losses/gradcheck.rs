//! Central finite-difference checks of analytic gradients.

use serde::Serialize;

use super::{BoundaryParams, EmbeddingBatch, LossOutput};
use crate::error::{Error, Result};

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`; infinite when either side is not finite.
#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !(analytic.is_finite() && numeric.is_finite()) {
        return f64::INFINITY;
    }
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0, |m, (&a, &n)| f64::max(m, relative_error(a, n)))
}

/// Central-difference gradient of `f` at `x`. `x` is restored on return.
pub fn numeric_gradient<F>(mut f: F, x: &mut [f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x)?;
        x[i] = orig - h;
        let minus = f(x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest relative error per parameter group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub z: f64,
    pub t_log: f64,
    pub b: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.z.max(self.t_log).max(self.b)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Compares the analytic gradients of `loss_fn` with central differences
/// over every coordinate of the embedding and both boundary scalars.
/// `h` must lie in `[1e-8, 1e-4]`.
pub fn finite_difference_check<F>(
    loss_fn: F,
    batch: &EmbeddingBatch,
    params: &BoundaryParams,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&EmbeddingBatch, &BoundaryParams) -> Result<LossOutput>,
{
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::Range {
            name: "h",
            reason: format!("step {h} outside [1e-8, 1e-4]"),
        });
    }
    check_with_step(loss_fn, batch, params, h)
}

pub(crate) fn check_with_step<F>(
    loss_fn: F,
    batch: &EmbeddingBatch,
    params: &BoundaryParams,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&EmbeddingBatch, &BoundaryParams) -> Result<LossOutput>,
{
    let analytic = loss_fn(batch, params)?;

    let mut probe = batch.clone();
    let mut z = batch.z.data().to_vec();
    let numeric_z = numeric_gradient(
        |x| {
            probe.z.data_mut().copy_from_slice(x);
            Ok(loss_fn(&probe, params)?.value)
        },
        &mut z,
        h,
    )?;

    let mut scalars = [params.t_log, params.b];
    let numeric_scalars = numeric_gradient(
        |x| {
            let p = BoundaryParams {
                t_log: x[0],
                b: x[1],
            };
            Ok(loss_fn(batch, &p)?.value)
        },
        &mut scalars,
        h,
    )?;

    Ok(GradCheckReport {
        z: max_relative_error(analytic.grad_z.data(), &numeric_z),
        t_log: relative_error(analytic.grad_t_log, numeric_scalars[0]),
        b: relative_error(analytic.grad_b, numeric_scalars[1]),
    })
}
