//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the estimates are independent
//! of the analytic backward pass they are compared against.

/// Central-difference estimate of d f / d x_i for every coordinate.
pub fn numeric_gradient(x: &[f64], delta: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + delta;
            let up = f(&probe);
            probe[i] = orig - delta;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * delta)
        })
        .collect()
}

/// Largest elementwise relative error, with `floor` guarding the
/// denominator for near-zero gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
