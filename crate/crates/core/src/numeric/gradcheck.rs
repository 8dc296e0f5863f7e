//! Central finite-difference check of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};

/// Finite-difference step per coordinate.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively,
/// so coordinates whose true derivative is zero do not divide by noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences of `f` around `params`.
pub fn numeric_gradient<F>(mut f: F, params: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x);
        x[i] = orig - FD_STEP;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `f` at `params`.
pub fn grad_check<F>(f: F, analytic: &[f64], params: &[f64], tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
    }
    let numeric = numeric_gradient(f, params)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        tolerance: tol,
        passed: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sum_of_squares_random_point() {
        let mut rng = Rng::new(42);
        let x: Vec<f64> = (0..10).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(|p| p.iter().map(|v| v * v).sum(), &g, &x, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = [1.5, -0.7];
        let g: Vec<f64> = x.iter().map(|v| 4.0 * v).collect();
        let r = grad_check(|p| p.iter().map(|v| v * v).sum(), &g, &x, 1e-6).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_objective_is_error() {
        let r = grad_check(|x| x[0].ln(), &[1.0], &[0.0], 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
