//! Truncated SDF regression loss.

/// `clamp(d, delta) = min(max(-delta, d), delta)`.
#[inline]
pub fn clamp_sdf(d: f64, delta: f64) -> f64 {
    d.max(-delta).min(delta)
}

/// Truncated l1 loss between a predicted and a target SDF value:
/// `|clamp(pred, delta) - clamp(target, delta)|`. Bounded by `2*delta`.
#[inline]
pub fn clamped_l1(pred: f64, target: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    (clamp_sdf(pred, delta) - clamp_sdf(target, delta)).abs()
}

/// Derivative of [`clamped_l1`] with respect to `pred`. Zero where the
/// prediction sits outside the truncation band or the difference vanishes.
#[inline]
pub fn clamped_l1_dpred(pred: f64, target: f64, delta: f64) -> f64 {
    let diff = clamp_sdf(pred, delta) - clamp_sdf(target, delta);
    if pred <= -delta || pred >= delta {
        0.0
    } else if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn one_sided_clamp() {
        assert_abs_diff_eq!(clamped_l1(0.3, 0.05, 0.1), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn identity_case() {
        assert_abs_diff_eq!(clamped_l1(0.42, 0.42, 0.1), 0.0);
        assert_abs_diff_eq!(clamped_l1(-3.0, -3.0, 0.1), 0.0);
    }

    #[test]
    fn both_clamped_hits_maximum() {
        assert_abs_diff_eq!(clamped_l1(-0.5, 0.5, 0.1), 0.2, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in -2.0f64..2.0, b in -2.0f64..2.0, delta in 0.01f64..0.5) {
            let l = clamped_l1(a, b, delta);
            prop_assert!((l - clamped_l1(b, a, delta)).abs() < 1e-15);
            prop_assert!((0.0..=2.0 * delta + 1e-15).contains(&l));
        }

        #[test]
        fn derivative_matches_finite_differences(a in -0.3f64..0.3, b in -0.3f64..0.3) {
            let delta = 0.1;
            let h = 1e-7;
            // Skip kink neighborhoods where the subgradient is not two-sided.
            prop_assume!((a.abs() - delta).abs() > 1e-3);
            prop_assume!((a - b).abs() > 1e-3);
            let fd = (clamped_l1(a + h, b, delta) - clamped_l1(a - h, b, delta)) / (2.0 * h);
            prop_assert!((fd - clamped_l1_dpred(a, b, delta)).abs() < 1e-6);
        }
    }
}
