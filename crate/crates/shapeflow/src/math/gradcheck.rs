//! Central finite-difference helpers for validating analytic gradients.

/// Central finite differences of a scalar function along every coordinate of
/// `x`. The buffer is perturbed in place and restored, so `f` may borrow it.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let saved = x[i];
        x[i] = saved + h;
        let fp = f(x);
        x[i] = saved - h;
        let fm = f(x);
        x[i] = saved;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Worst relative disagreement between two gradient vectors. The denominator
/// is floored so that near-zero coordinates are compared absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_known_polynomial_gradient() {
        // f(x, y) = x^2 y + 3y, grad = (2xy, x^2 + 3)
        let mut x = vec![1.5, -0.75];
        let g = finite_diff(&mut |p| p[0] * p[0] * p[1] + 3.0 * p[1], &mut x, 1e-5);
        assert_relative_eq!(g[0], 2.0 * 1.5 * -0.75, max_relative = 1e-8);
        assert_relative_eq!(g[1], 1.5 * 1.5 + 3.0, max_relative = 1e-8);
        // The probe restores its input.
        assert_eq!(x, vec![1.5, -0.75]);
    }

    #[test]
    fn rel_error_floors_tiny_denominators() {
        assert_eq!(max_rel_error(&[0.0], &[0.0]), 0.0);
        assert!(max_rel_error(&[1e-9], &[0.0]) < 1e-2);
        assert!(max_rel_error(&[1.0], &[2.0]) >= 0.5);
    }
}
