//! Finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only ever calls a black-box
//! closure, so agreement with `Graph::backward` is evidence, not tautology.

use alloc::vec::Vec;

/// Step size balancing truncation against cancellation for f64 losses.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`: `(f(x+h) - f(x-h)) / 2h`
/// per coordinate. Cost is two evaluations per coordinate.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst mixed (absolute-or-relative) discrepancy between two gradients,
/// with the offending coordinate. Mixed error `|a-b| / (1 + |b|)` stays
/// meaningful for both tiny and large gradient entries.
pub fn max_discrepancy(analytic: &[f64], numeric: &[f64]) -> (usize, f64) {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = (0, 0.0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = crate::fmath::abs(a - n) / (1.0 + crate::fmath::abs(*n));
        if err > worst.1 {
            worst = (i, err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_recovered() {
        // f(x) = x0^2 * x1, grad = (2*x0*x1, x0^2)
        let f = |x: &[f64]| x[0] * x[0] * x[1];
        let x = [1.5, -2.0];
        let g = central_diff(f, &x, FD_STEP);
        let expected = [2.0 * 1.5 * -2.0, 1.5 * 1.5];
        let (_, err) = max_discrepancy(&expected, &g);
        assert!(err < 1e-9, "err = {err}");
    }
}
