//! Central finite-difference gradient checking.

use rand::Rng;

use crate::{Error, Result};

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over checked coordinates.
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    /// Analytic / numeric gradient at the worst coordinate.
    pub worst_pair: (f64, f64),
    /// Number of coordinates checked.
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / denom
    }
}

/// Checks `analytic` against central differences of `loss` at `params`, over
/// the given coordinates. `loss` must be finite at `params`.
pub fn finite_diff_check_coords<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::dim("finite_diff_check", params.len(), analytic.len()));
    }
    let base = loss(params);
    if !base.is_finite() {
        return Err(Error::NonFinite("finite_diff_check base loss".into()));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        checked: 0,
        tol,
        pass: true,
    };
    for &i in coords {
        let orig = work[i];
        work[i] = orig + h;
        let up = loss(&work);
        work[i] = orig - h;
        let down = loss(&work);
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_check coord {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.worst_pair = (analytic[i], numeric);
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Checks every coordinate.
pub fn finite_diff_check<F>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_coords(loss, params, analytic, &coords, h, tol)
}

/// Checks `n` randomly sampled coordinates (all of them when the parameter
/// vector is smaller than `n`). Used by the composite-model checks where a
/// full sweep would be too slow.
pub fn finite_diff_check_sampled<F, R>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    n: usize,
    h: f64,
    tol: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let coords: Vec<usize> = if params.len() <= n {
        (0..params.len()).collect()
    } else {
        (0..n).map(|_| rng.gen_range(0..params.len())).collect()
    };
    finite_diff_check_coords(loss, params, analytic, &coords, h, tol)
}
