//! Dense factorizations and the ridge solve built on them.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Real;

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    lower: Matrix<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch(format!(
                "cholesky of {:?}",
                a.shape()
            )));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag = diag - l[(j, k)] * l[(j, k)];
            }
            if !(diag > T::zero()) {
                return Err(Error::NotPositiveDefinite(format!("pivot {j} is {diag}")));
            }
            let d = diag.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                let (ri, rj) = (i * n, j * n);
                let ls = l.as_slice();
                for k in 0..j {
                    s = s - ls[ri + k] * ls[rj + k];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix<T> {
        &self.lower
    }

    /// Solves `A X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.lower.rows();
        if b.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "solve with {n}x{n} factor and rhs {:?}",
                b.shape()
            )));
        }
        let m = b.cols();
        let l = &self.lower;
        let mut x = b.clone();
        // L y = b
        for i in 0..n {
            for k in 0..i {
                let lik = l[(i, k)];
                if lik != T::zero() {
                    for c in 0..m {
                        let v = x[(k, c)];
                        x[(i, c)] = x[(i, c)] - lik * v;
                    }
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v = *v / d;
            }
        }
        // L^T x = y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = l[(k, i)];
                if lki != T::zero() {
                    for c in 0..m {
                        let v = x[(k, c)];
                        x[(i, c)] = x[(i, c)] - lki * v;
                    }
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v = *v / d;
            }
        }
        Ok(x)
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    packed: Matrix<T>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch(format!("lu of {:?}", a.shape())));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs().max(T::min_positive_value());
        for k in 0..n {
            let (p, pivot) =
                (k..n)
                    .map(|i| (i, lu[(i, k)].abs()))
                    .fold(
                        (k, T::zero()),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pivot <= scale * T::epsilon() {
                return Err(Error::Singular(format!("pivot {k} is {pivot}")));
            }
            if p != k {
                for c in 0..n {
                    let tmp = lu[(k, c)];
                    lu[(k, c)] = lu[(p, c)];
                    lu[(p, c)] = tmp;
                }
                perm.swap(k, p);
            }
            let d = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != T::zero() {
                    for c in (k + 1)..n {
                        let v = lu[(k, c)];
                        lu[(i, c)] = lu[(i, c)] - f * v;
                    }
                }
            }
        }
        Ok(Self { packed: lu, perm })
    }

    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.packed.rows();
        if b.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "solve with {n}x{n} factor and rhs {:?}",
                b.shape()
            )));
        }
        let m = b.cols();
        let lu = &self.packed;
        let mut x = b.select_rows(&self.perm);
        for i in 0..n {
            for k in 0..i {
                let f = lu[(i, k)];
                if f != T::zero() {
                    for c in 0..m {
                        let v = x[(k, c)];
                        x[(i, c)] = x[(i, c)] - f * v;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let f = lu[(i, k)];
                if f != T::zero() {
                    for c in 0..m {
                        let v = x[(k, c)];
                        x[(i, c)] = x[(i, c)] - f * v;
                    }
                }
            }
            let d = lu[(i, i)];
            for v in x.row_mut(i) {
                *v = *v / d;
            }
        }
        Ok(x)
    }
}

/// Solves `A X = B` for symmetric positive definite `A`: Cholesky first,
/// LU with partial pivoting if the Cholesky pivots break down.
pub fn solve_spd<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    match Cholesky::factor(a) {
        Ok(c) => c.solve(b),
        Err(Error::NotPositiveDefinite(_)) => Lu::factor(a)?.solve(b),
        Err(e) => Err(e),
    }
}

/// Ridge regression `argmin_W ||Y - F W||^2 + lambda ||W||^2`, solved from
/// the normal equations `(F^T F + lambda I) W = F^T Y`.
pub fn ridge_solve<T: Real>(
    features: &Matrix<T>,
    targets: &Matrix<T>,
    lambda: T,
) -> Result<Matrix<T>> {
    if features.rows() == 0 {
        return Err(Error::EmptyInput("ridge_solve needs at least one row"));
    }
    if features.rows() != targets.rows() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} rows, targets {}",
            features.rows(),
            targets.rows()
        )));
    }
    if !(lambda > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "ridge lambda must be positive, got {lambda}"
        )));
    }
    let mut gram = features.t_matmul(features);
    for i in 0..gram.rows() {
        gram[(i, i)] = gram[(i, i)] + lambda;
    }
    let rhs = features.t_matmul(targets);
    let w = solve_spd(&gram, &rhs)?;
    if !w.is_finite() {
        return Err(Error::NonFinite("ridge solution".into()));
    }
    Ok(w)
}

/// `(F^T F + lambda I)^{-1}`, the quantity the recursive classifier tracks.
pub fn regularized_gram_inverse<T: Real>(features: &Matrix<T>, lambda: T) -> Result<Matrix<T>> {
    let mut gram = features.t_matmul(features);
    for i in 0..gram.rows() {
        gram[(i, i)] = gram[(i, i)] + lambda;
    }
    let mut inv = solve_spd(&gram, &Matrix::identity(gram.rows()))?;
    inv.symmetrize();
    Ok(inv)
}
