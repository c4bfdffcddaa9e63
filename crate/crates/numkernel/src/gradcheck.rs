//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{KernelError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for float64 central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Flat coordinate with the largest error.
    pub worst_coord: usize,
    /// Relative disagreement of the forward and backward one-sided slopes at
    /// `worst_coord`. Comparable to `max_rel_error` when the step straddles a
    /// kink, near zero where the function is smooth.
    pub worst_slope_gap: f64,
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(KernelError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Max relative error between the tape gradient of `f` at `point` and
/// central differences over every coordinate.
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    Ok(check_gradients_at(&f, point, step, &coords)?.max_rel_error)
}

/// Like [`check_gradients`] but only over the listed flat coordinates.
pub fn check_gradients_at<F>(f: &F, point: &Tensor, step: f64, coords: &[usize]) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !point.all_finite() {
        return Err(KernelError::NonFinite);
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).all_finite() {
        return Err(KernelError::NonFinite);
    }
    let f0 = tape.value(y).item();
    tape.backward(y)?;
    let analytic = tape.grad(x);

    let mut report = GradReport { max_rel_error: 0.0, coords_checked: 0, worst_coord: 0, worst_slope_gap: 0.0 };
    let mut p = point.clone();
    for &c in coords {
        let orig = p.data()[c];
        p.data_mut()[c] = orig + step;
        let fp = eval_scalar(f, &p)?;
        p.data_mut()[c] = orig - step;
        let fm = eval_scalar(f, &p)?;
        p.data_mut()[c] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let err = relative_error(analytic.data()[c], numeric);
        if !err.is_finite() {
            return Err(KernelError::NonFinite);
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = c;
            report.worst_slope_gap = relative_error((fp - f0) / step, (f0 - fm) / step);
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Checks gradients of a scalar function of model parameters with respect to
/// the parameter group `group`. At most `max_coords` coordinates per tensor
/// are sampled (all when `None`).
pub fn check_param_gradients<F, R>(
    store: &ParamStore,
    group: &[ParamId],
    f: F,
    step: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, |id| group.contains(&id));
    let y = f(&mut tape, &vars)?;
    if tape.value(y).len() != 1 {
        return Err(KernelError::NotScalar(tape.shape(y).to_vec()));
    }
    if !tape.value(y).all_finite() {
        return Err(KernelError::NonFinite);
    }
    let f0 = tape.value(y).item();
    tape.backward(y)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = s.bind(&mut t, |_| false);
        let out = f(&mut t, &v)?;
        Ok(t.value(out).item())
    };

    let mut report = GradReport { max_rel_error: 0.0, coords_checked: 0, worst_coord: 0, worst_slope_gap: 0.0 };
    let mut work = store.clone();
    for &id in group {
        let analytic = tape.grad(vars[id.0]);
        let n = analytic.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + step;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - step;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let err = relative_error(analytic.data()[c], (fp - fm) / (2.0 * step));
            if !err.is_finite() {
                return Err(KernelError::NonFinite);
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_coord = c;
                report.worst_slope_gap = relative_error((fp - f0) / step, (f0 - fm) / step);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
