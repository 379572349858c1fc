//! Small dense linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns `(eigenvalues, eigenvectors)` with the eigenvectors as columns,
/// so `m ~ v * diag(w) * v^T`.
///
/// Used instead of the QR-based solver for covariance work: Jacobi
/// rotations cannot mispair eigenvalues with eigenvectors, which the QR
/// path has been observed to do on nearly block-diagonal inputs, and they
/// resolve small eigenvalues of graded matrices to high relative accuracy.
pub(crate) fn symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols(), "symmetric_eigen needs a square matrix");
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                // An off-diagonal entry below roundoff relative to its two
                // diagonal neighbors contributes nothing resolvable.
                if apq.abs() <= f64::EPSILON * (a[(p, p)].abs() + a[(q, q)].abs()) {
                    continue;
                }
                rotated = true;
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (a.diagonal(), v)
}
