//! Small dense helpers: PSD square roots, eigenvalue floors and the flat
//! row-major kernels used inside particle loops.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(sym))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigen range `(min, max)` of a symmetric matrix.
pub fn eigen_range(sym: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(symmetrize(sym)).eigenvalues;
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Symmetric PSD square root `S` with `S S^T = A`, negative eigenvalues
/// clipped to zero. Returns the root and the smallest pre-clip eigenvalue.
pub fn psd_sqrt(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), f64::INFINITY);
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut root = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        if lam == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        root += (&v * v.transpose()) * lam;
    }
    (symmetrize(&root), min)
}

/// Lower Cholesky factor, failing if the matrix is not positive definite.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::linalg::Cholesky::new(symmetrize(a)).map(|c| c.l())
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// `out += a * x` for a row-major `rows x cols` matrix.
#[inline]
pub fn gemv_acc(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let mut s = 0.0;
        for j in 0..cols {
            s += row[j] * x[j];
        }
        out[i] += s;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn psd_sqrt_reconstructs_and_clips() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (s, min) = psd_sqrt(&a);
        assert_abs_diff_eq!(min, 1.0, epsilon = 1e-12);
        assert!(max_abs(&(&s * s.transpose() - &a)) < 1e-12);

        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-9]);
        let (s, min) = psd_sqrt(&b);
        assert!(min < 0.0);
        assert_abs_diff_eq!(s[(1, 1)], 0.0);
        assert_abs_diff_eq!(s[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn gemv_matches_nalgebra() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let x = [0.3, -2.0, 1.5];
        let mut out = vec![1.0, 1.0];
        gemv_acc(&to_row_major(&a), 2, 3, &x, &mut out);
        let expect = &a * nalgebra::DVector::from_column_slice(&x);
        assert_abs_diff_eq!(out[0], 1.0 + expect[0], epsilon = 1e-14);
        assert_abs_diff_eq!(out[1], 1.0 + expect[1], epsilon = 1e-14);
    }
}
