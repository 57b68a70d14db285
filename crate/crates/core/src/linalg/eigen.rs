//! Cyclic Jacobi eigensolver for real symmetric matrices.

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Upper bound on full Jacobi sweeps.
pub const MAX_SWEEPS: usize = 100;

/// Off-diagonal Frobenius tolerance, relative to the input's Frobenius norm.
pub const OFF_DIAGONAL_TOLERANCE: f64 = 1e-11;

/// Eigenpairs of a symmetric matrix, eigenvalues in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition<T> {
    pub eigenvalues: Vec<T>,
    /// Column `i` is the unit eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Matrix<T>,
}

impl<T: Scalar> EigenDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V · diag(λ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let v = &self.eigenvectors;
        let scaled = Matrix::from_fn(v.rows(), v.cols(), |r, c| v[(r, c)] * self.eigenvalues[c]);
        scaled.matmul_transposed(v).expect("square factors")
    }

    /// Replaces negative eigenvalues with zero. Meant for positive semidefinite inputs,
    /// where negatives are rounding residue.
    pub fn clamp_nonnegative(mut self) -> Self {
        for v in &mut self.eigenvalues {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self
    }

    /// The first `k` eigenvectors as a `dim × k` matrix.
    pub fn leading(&self, k: usize) -> Result<Matrix<T>> {
        self.eigenvectors.col_slice(0, k)
    }
}

fn off_diagonal_norm<T: Scalar>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut acc = T::zero();
    for p in 0..n {
        for q in 0..n {
            if p != q {
                acc += a[(p, q)] * a[(p, q)];
            }
        }
    }
    acc.sqrt()
}

/// Eigendecomposition of a symmetric matrix. The input is symmetrized as `(s + sᵀ)/2` first.
///
/// Eigenvalues come back sorted descending; equal eigenvalues keep the order the rotations
/// left them in.
pub fn sym_eig<T: Scalar>(s: &Matrix<T>) -> Result<EigenDecomposition<T>> {
    if s.rows() != s.cols() {
        return shape_err(format!("sym_eig needs a square matrix, got {}x{}", s.rows(), s.cols()));
    }
    if !s.is_finite() {
        return Err(Error::Data("sym_eig input has non-finite entries".into()));
    }
    let n = s.rows();
    let mut a = s.symmetrize()?;
    let mut v = Matrix::<T>::identity(n);
    let tol = T::lit(OFF_DIAGONAL_TOLERANCE).max(T::tolerance_floor()) * a.frobenius_norm();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    let residual = off_diagonal_norm(&a);
    if !converged && residual > tol {
        return Err(Error::Convergence { sweeps: MAX_SWEEPS, residual: residual.as_f64() });
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep rotation order
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite eigenvalues"));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// One Jacobi rotation annihilating `a[p][q]`, accumulated into `v`.
fn rotate<T: Scalar>(a: &mut Matrix<T>, v: &mut Matrix<T>, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == T::zero() {
        return;
    }
    let two = T::lit(2.0);
    let theta = (a[(q, q)] - a[(p, p)]) / (two * apq);
    let t = if (theta * theta).is_infinite() {
        T::lit(0.5) / theta
    } else {
        let mag = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
        if theta < T::zero() {
            -mag
        } else {
            mag
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;
    let n = a.rows();
    for k in 0..n {
        let (akp, akq) = (a[(k, p)], a[(k, q)]);
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = T::zero();
    a[(q, p)] = T::zero();
    for k in 0..n {
        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}
