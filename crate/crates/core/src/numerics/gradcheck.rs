//! Finite-difference gradient verification.
//!
//! The checker only re-runs forward evaluations, so it stays independent of
//! the backward implementation it validates. Always run it in `f64`.

/// Central differences: (f(x+h) - f(x-h)) / 2h per coordinate.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = f(&xs);
        xs[i] = orig - eps;
        let fm = f(&xs);
        xs[i] = orig;
        out[i] = (fp - fm) / (2.0 * eps);
    }
    out
}

/// Central differences for a sampled subset of coordinates; returns
/// (index, numeric derivative) pairs.
pub fn central_diff_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    eps: f64,
) -> Vec<(usize, f64)> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = f(&xs);
        xs[i] = orig - eps;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((i, (fp - fm) / (2.0 * eps)));
    }
    out
}

/// Largest relative disagreement. The floor absorbs finite-difference noise
/// on near-zero entries without masking real sign or scale errors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-3);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
