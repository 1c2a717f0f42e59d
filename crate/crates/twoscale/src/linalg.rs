//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Spectral norm (largest singular value) by power iteration on `mᵀm`.
///
/// Deterministic: starts from the all-ones vector, runs at most 50 iterations,
/// stops early when the Rayleigh quotient moves by less than 1e-10 relative.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    if r == 1 && c == 1 {
        return m[(0, 0)].abs();
    }
    let gram = m.transpose() * m;
    let mut v = DVector::from_element(c, 1.0 / (c as f64).sqrt());
    let mut lambda = 0.0_f64;
    for _ in 0..50 {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs().max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// Euclidean norm of a slice; convenience for hot loops that avoid DVector views.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
