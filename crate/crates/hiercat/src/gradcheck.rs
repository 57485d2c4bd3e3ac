//! Central finite-difference gradient checking.
//!
//! Analytic gradients from the tape are trusted only because they agree with
//! this independent numeric oracle. The comparison uses a guarded relative
//! error: `|a - n| / max(|a|, |n|, 1e-6)`, so near-zero gradient pairs are
//! compared absolutely at the guard scale instead of dividing by noise.

/// Numeric gradient of `f` at `x` by central differences with the given step.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Guarded relative error between one analytic/numeric gradient pair.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Worst guarded relative error across two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert!(
        analytic.len() == numeric.len(),
        "gradient length mismatch: {} vs {}",
        analytic.len(),
        numeric.len()
    );
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
