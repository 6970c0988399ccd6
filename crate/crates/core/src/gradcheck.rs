//! Finite-difference helpers for checking analytic gradients.

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central difference along one direction.
pub fn directional_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let shifted = |s: f64| x.iter().zip(dir).map(|(a, d)| a + s * d).collect::<Vec<_>>();
    (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
}

/// `max|a - n| / max(max|n|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

/// Relative error of two scalars with the same floor.
pub fn scalar_relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1e-8)
}
