//! Central finite-difference gradient oracle.
//!
//! Uses forward evaluation only, so it stays independent of the tape's
//! backward pass that the tests check against.

/// Central difference d f / d x_i at every coordinate, step `h`.
pub fn finite_diff<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + h;
        let fp = f(&p);
        p[i] = point[i] - h;
        let fm = f(&p);
        p[i] = point[i];
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Max relative error between analytic and numerical gradients.
///
/// The denominator is floored at 1 so that near-zero gradients compare
/// absolutely rather than blowing up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
