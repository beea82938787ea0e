//! Small dense linear-algebra helpers shared by the encoders, losses, and
//! generator backward passes. Everything loops in index order so results are
//! bitwise deterministic.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// Row-major (rows x cols) matrix times vector.
pub(crate) fn matvec(matrix: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(matrix.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        out[r] = dot(&matrix[r * cols..(r + 1) * cols], x);
    }
    out
}

/// Transposed product: matrix^T * x for a row-major (rows x cols) matrix.
pub(crate) fn matvec_transpose(matrix: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(matrix.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        axpy(x[r], &matrix[r * cols..(r + 1) * cols], &mut out);
    }
    out
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    // Rounding can push the ratio a hair past one for near-identical
    // vectors; clamp to the mathematical range so downstream range checks
    // (report validation, similarity bounds) hold for legitimate inputs.
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// Pullback of v -> v/|v|: maps a cotangent on the output to one on `v`.
/// `pre_norm` is the un-normalized input, `unit` its normalized image.
pub(crate) fn normalize_vjp(pre_norm: &[f64], unit: &[f64], cotangent: &[f64]) -> Vec<f64> {
    let n = norm(pre_norm);
    let radial = dot(unit, cotangent);
    let mut out = Vec::with_capacity(pre_norm.len());
    for i in 0..pre_norm.len() {
        out.push((cotangent[i] - unit[i] * radial) / n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_transpose_agrees_with_explicit_transpose() {
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let x = [10.0, 20.0];
        let out = matvec_transpose(&m, &x, 2, 3);
        assert_eq!(out, vec![1.0 * 10.0 + 4.0 * 20.0, 2.0 * 10.0 + 5.0 * 20.0, 3.0 * 10.0 + 6.0 * 20.0]);
    }

    #[test]
    fn normalize_vjp_is_tangent_to_the_sphere() {
        let v = [3.0, 4.0];
        let unit = [0.6, 0.8];
        let grad = normalize_vjp(&v, &unit, &[1.0, 0.0]);
        // The pullback of a sphere-valued map annihilates the radial direction.
        assert!(dot(&grad, &unit).abs() < 1e-12);
    }
}
