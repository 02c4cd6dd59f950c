//! Finite-difference gradient checking.
//!
//! Every analytic gradient in this crate (quaternion ops, forward
//! kinematics, tape primitives) is validated against centered differences
//! of the same forward function. The checker never looks at the analytic
//! path, so it stays an independent oracle.

/// Default step for centered differences on unit-scale inputs.
pub const FD_STEP: f64 = 1e-5;

/// Centered-difference gradient of a scalar function at `x`.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for idx in 0..x.len() {
        let orig = xs[idx];
        xs[idx] = orig + h;
        let hi = f(&xs);
        xs[idx] = orig - h;
        let lo = f(&xs);
        xs[idx] = orig;
        grad[idx] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise relative error between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

/// Asserts that an analytic gradient matches centered differences.
///
/// `floor` guards the relative error against noise when both sides are
/// near zero; pick it a few orders below the typical gradient magnitude.
pub fn assert_grad_close<F: FnMut(&[f64]) -> f64>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    floor: f64,
) {
    let numeric = finite_diff(f, x, h);
    let err = max_rel_err(analytic, &numeric, floor);
    assert!(
        err < tol,
        "gradient check failed: max rel err {err:e} >= {tol:e}\nanalytic: {analytic:?}\nnumeric:  {numeric:?}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_polynomial_derivative() {
        // f(x, y) = x^2 y + 3y, df/dx = 2xy, df/dy = x^2 + 3.
        let f = |v: &[f64]| v[0] * v[0] * v[1] + 3.0 * v[1];
        let x = [1.5, -2.0];
        let grad = finite_diff(f, &x, FD_STEP);
        assert!((grad[0] - 2.0 * 1.5 * -2.0).abs() < 1e-8);
        assert!((grad[1] - (1.5 * 1.5 + 3.0)).abs() < 1e-8);
    }

    #[test]
    fn rel_err_uses_floor_near_zero() {
        assert!(rel_err(1e-12, 0.0, 1e-6) < 1e-5);
        assert!((rel_err(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-12);
    }
}
