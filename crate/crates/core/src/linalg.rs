//! Small dense linear algebra: symmetric eigenvalues, spectral norms, Cholesky.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Tensor) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigenvalues needs a square matrix");
    let mut m: Vec<f64> = a.data().to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(a: &Tensor) -> f64 {
    symmetric_eigenvalues(a).last().copied().unwrap_or(0.0)
}

/// Largest singular value.
pub fn spectral_norm(w: &Tensor) -> f64 {
    let gram = if w.rows() <= w.cols() {
        w.matmul_t(w).expect("square by construction")
    } else {
        w.t_matmul(w).expect("square by construction")
    };
    math::sqrt(lambda_max(&gram).max(0.0))
}

/// Lower-triangular Cholesky factor of a symmetric positive semidefinite
/// matrix. Zero pivots (rank deficiency) leave the column zero.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::ShapeMismatch("cholesky needs a square matrix".into()));
    }
    let scale = (0..n).map(|i| math::abs(a.get(i, i))).fold(0.0, f64::max).max(1e-300);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d < -1e-10 * scale {
            return Err(Error::InvalidCovariance("matrix is not positive semidefinite".into()));
        }
        let djj = math::sqrt(d.max(0.0));
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = if djj > 1e-150 { s / djj } else { 0.0 };
        }
    }
    Tensor::matrix(n, n, l)
}
