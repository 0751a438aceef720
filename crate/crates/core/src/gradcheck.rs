//! Finite-difference helpers for checking hand-written gradients.

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn central_difference(point: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Denominator floor so that two vanishing gradients compare as equal.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest element-wise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = central_difference(&[1.0, -2.0, 0.5], 1e-5, |x| x.iter().map(|v| v * v).sum());
        assert!(max_relative_error(&g, &[2.0, -4.0, 1.0]) < 1e-9);
    }

    #[test]
    fn floor_handles_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-3);
    }
}
