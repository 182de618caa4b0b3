//! Central-difference gradient verification.
//!
//! Every loss in this crate ships an analytic gradient; these helpers compare
//! selected coordinates against `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` with the
//! pinned step and tolerance.

use crate::error::Result;

/// Perturbation step for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Acceptance threshold on [`relative_error`].
pub const FD_TOL: f64 = 1e-3;

/// `|analytic − fd| / max(1, |fd|)` — absolute near zero, relative at scale.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Central-difference derivative of `loss` along coordinate `index`.
/// The parameter vector is restored before returning.
pub fn central_difference<F>(params: &mut [f64], index: usize, h: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let original = params[index];
    params[index] = original + h;
    let up = loss(params);
    params[index] = original - h;
    let down = loss(params);
    params[index] = original;
    Ok((up? - down?) / (2.0 * h))
}

/// Worst coordinate found while checking `indices`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_error <= FD_TOL
    }
}

/// Compare `analytic[i]` against a central difference at each listed
/// coordinate using the pinned step [`FD_STEP`].
pub fn check_coordinates<F>(
    params: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_error: 0.0,
        worst_index: 0,
    };
    for &i in indices {
        let fd = central_difference(params, i, FD_STEP, &mut loss)?;
        let err = relative_error(analytic[i], fd);
        if err > report.max_error {
            report.max_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
