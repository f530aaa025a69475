//! Central-difference gradient estimates, used as the oracle for every
//! backward rule.

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for each coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative discrepancy between two gradients. Differences are
/// scaled by `max(|a|, |b|, floor)` so entries that are both near zero
/// compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
