//! Sinusoidal positional encoding of query points.

use super::MathError;

/// Output dimension of [`positional_encoding`]: raw xyz plus sin/cos pairs
/// for each band and coordinate.
pub fn positional_encoding_dim(bands: usize) -> usize {
    3 + 6 * bands
}

/// Encodes a 3D point as `[x, y, z, sin(2^k pi x..z), cos(2^k pi x..z), ...]`
/// for `k = 0..bands-1`. Layout groups by band: for each `k`, the three sin
/// terms then the three cos terms.
pub fn positional_encoding(x: [f64; 3], bands: usize) -> Result<Vec<f64>, MathError> {
    assert!(bands >= 1, "positional encoding needs at least one band");
    if !x.iter().all(|v| v.is_finite()) {
        return Err(MathError::NonFinite {
            context: "positional_encoding input",
        });
    }
    let mut out = Vec::with_capacity(positional_encoding_dim(bands));
    out.extend_from_slice(&x);
    for k in 0..bands {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            out.push((f * x[c]).sin());
        }
        for c in 0..3 {
            out.push((f * x[c]).cos());
        }
    }
    Ok(out)
}

/// Writes the encoding of `x` into `out` (length must be `3 + 6*bands`).
/// Allocation-free variant for batched callers.
pub fn positional_encoding_into(x: [f64; 3], bands: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), positional_encoding_dim(bands));
    out[..3].copy_from_slice(&x);
    let mut i = 3;
    for k in 0..bands {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            out[i] = (f * x[c]).sin();
            i += 1;
        }
        for c in 0..3 {
            out[i] = (f * x[c]).cos();
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_input_gives_zero_sines_unit_cosines() {
        let e = positional_encoding([0.0, 0.0, 0.0], 8).unwrap();
        assert_eq!(e.len(), 51);
        assert_eq!(&e[..3], &[0.0, 0.0, 0.0]);
        for k in 0..8 {
            let base = 3 + 6 * k;
            for c in 0..3 {
                assert_abs_diff_eq!(e[base + c], 0.0);
                assert_abs_diff_eq!(e[base + 3 + c], 1.0);
            }
        }
    }

    #[test]
    fn quarter_period_first_band() {
        let e = positional_encoding([0.5, 0.0, 0.0], 8).unwrap();
        // k = 0 slots: sin(pi/2) = 1, cos(pi/2) = 0 on the x coordinate.
        assert_abs_diff_eq!(e[3], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[6], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dimension_formula_matches_enumerated_layout() {
        // Hand enumeration for B = 4: 3 raw + 4 bands * (3 sin + 3 cos) = 27.
        let bands = 4;
        let mut count = 3;
        for _k in 0..bands {
            count += 3 + 3;
        }
        assert_eq!(count, 27);
        let e = positional_encoding([0.1, -0.2, 0.3], bands).unwrap();
        assert_eq!(e.len(), count);
        assert_eq!(positional_encoding_dim(bands), count);
        // Band k frequency doubles: check slot values directly against formula.
        for k in 0..bands {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            let base = 3 + 6 * k;
            assert_abs_diff_eq!(e[base + 1], (f * -0.2).sin(), epsilon = 1e-15);
            assert_abs_diff_eq!(e[base + 5], (f * 0.3).cos(), epsilon = 1e-15);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(positional_encoding([f64::NAN, 0.0, 0.0], 8).is_err());
    }

    #[test]
    fn into_variant_matches() {
        let x = [0.23, -0.41, 0.07];
        let a = positional_encoding(x, 8).unwrap();
        let mut b = vec![0.0; 51];
        positional_encoding_into(x, 8, &mut b);
        assert_eq!(a, b);
    }
}
