//! Central finite-difference gradient checking helpers, used throughout the
//! test suites as the independent oracle for every analytic gradient.

/// Step size for central differences; with f64 this keeps truncation and
/// rounding error both well under the comparison tolerances.
pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`, perturbing one coordinate at a
/// time: (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let up = f(&buf);
        buf[i] = x[i] - h;
        let down = f(&buf);
        buf[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Relative error with a floor: |a-b| / max(|a|, |b|, 1e-3).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest elementwise relative error between two gradient buffers.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient buffers must align");
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}
