//! Central finite-difference comparison against analytic gradients.

use serde::Serialize;

/// Magnitude below which relative errors are measured against this floor
/// instead of the gradient itself.
const DENOM_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `point` with
/// step `eps`. Coordinates where `|point[i]| <= min_abs_value` are skipped.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    min_abs_value: f64,
) -> GradCheckReport {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..x.len() {
        if point[i].abs() <= min_abs_value {
            report.skipped += 1;
            continue;
        }
        x[i] = point[i] + eps;
        let up = f(&x);
        x[i] = point[i] - eps;
        let down = f(&x);
        x[i] = point[i];
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_index = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}
