//! Small dense linear algebra: row-major matrices, Cholesky solves and a
//! cyclic Jacobi eigensolver for symmetric matrices.
//!
//! Dimensions in this crate are the context dimension `d` (single digits in
//! practice), so plain `Vec` storage and O(d^3) routines are all we need.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d, d);
        for i in 0..d {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure!(data.len() == rows * cols, Contract, "matrix data has {} entries, expected {rows}x{cols}", data.len());
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == cols), Contract, "ragged rows");
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn diag(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| crate::scalar::dot(r, x)).collect()
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sub(&self, other: &Matrix<T>) -> Matrix<T> {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scaled(&self, s: T) -> Matrix<T> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    /// `self += w * x x^T`.
    pub fn add_outer(&mut self, x: &[T], w: T) {
        debug_assert!(self.is_square() && x.len() == self.rows);
        let d = self.rows;
        for i in 0..d {
            let wi = w * x[i];
            let row = &mut self.data[i * d..(i + 1) * d];
            for (r, &xj) in row.iter_mut().zip(x) {
                *r = *r + wi * xj;
            }
        }
    }

    /// `x^T A x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        crate::scalar::dot(x, &self.mul_vec(x))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt()
    }

    /// Symmetric up to `tol * max(1, max|a_ij|)`.
    pub fn is_symmetric(&self, tol: T) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = tol * self.max_abs().max(T::one());
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= scale))
    }

    pub fn symmetrized(&self) -> Matrix<T> {
        let half = T::lit(0.5);
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = half * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Cholesky factor of a symmetric positive definite matrix; `None` if a
    /// pivot is not strictly positive.
    pub fn cholesky(&self) -> Option<Cholesky<T>> {
        if !self.is_square() {
            return None;
        }
        let d = self.rows;
        let mut l = Matrix::zeros(d, d);
        for j in 0..d {
            let mut s = self[(j, j)];
            for k in 0..j {
                s = s - l[(j, k)] * l[(j, k)];
            }
            if s.is_nan() || s <= T::zero() {
                return None;
            }
            let ljj = s.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..d {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Some(Cholesky { l })
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    /// Only the lower triangle is trusted; callers check symmetry first.
    pub fn sym_eigen(&self) -> SymEigen<T> {
        assert!(self.is_square(), "eigendecomposition of non-square matrix");
        let n = self.rows;
        let mut a = self.symmetrized();
        let mut v = Matrix::identity(n);
        let eps = T::epsilon();
        for _sweep in 0..64 {
            let mut off = T::zero();
            for i in 0..n {
                for j in 0..i {
                    off = off + a[(i, j)] * a[(i, j)];
                }
            }
            let total = a.frobenius();
            if off.sqrt() <= eps * total || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[(p, q)];
                    if apq == T::zero() {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                    let t = if theta.abs() > T::lit(1e100) {
                        T::one() / (T::lit(2.0) * theta)
                    } else {
                        theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt())
                    };
                    let c = T::one() / (t * t + T::one()).sqrt();
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
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
        let values = order.iter().map(|&i| a[(i, i)]).collect();
        let mut vectors = Matrix::zeros(n, n);
        for (new, &old) in order.iter().enumerate() {
            for k in 0..n {
                vectors[(k, new)] = v[(k, old)];
            }
        }
        SymEigen { values, vectors }
    }

    /// Factor `S` with `S S^T = self` for a symmetric PSD matrix; negative
    /// eigenvalues from rounding are clamped to zero.
    pub fn psd_sqrt(&self) -> Matrix<T> {
        let eig = self.sym_eigen();
        let n = self.rows;
        let mut s = eig.vectors.clone();
        for (j, &lam) in eig.values.iter().enumerate() {
            let r = lam.max(T::zero()).sqrt();
            for i in 0..n {
                s[(i, j)] = s[(i, j)] * r;
            }
        }
        s
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone)]
pub struct SymEigen<T> {
    /// Ascending.
    pub values: Vec<T>,
    /// Column `j` is the eigenvector for `values[j]`.
    pub vectors: Matrix<T>,
}

impl<T: Real> SymEigen<T> {
    pub fn min(&self) -> T {
        self.values.first().copied().unwrap_or_else(T::zero)
    }

    pub fn max(&self) -> T {
        self.values.last().copied().unwrap_or_else(T::zero)
    }
}

#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn factor(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let d = self.l.rows();
        let mut y = b.to_vec();
        for i in 0..d {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in i + 1..d {
                s = s - self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Inverse of the factored matrix, symmetrized.
    pub fn inverse(&self) -> Matrix<T> {
        let d = self.l.rows();
        let mut inv = Matrix::zeros(d, d);
        let mut e = vec![T::zero(); d];
        for j in 0..d {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for i in 0..d {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrized()
    }

    /// `x^T A^{-1} x` for the factored `A`.
    pub fn inv_quad_form(&self, x: &[T]) -> T {
        crate::scalar::dot(x, &self.solve(x))
    }
}

/// Relative singularity rule for Gram matrices: singular when the smallest
/// eigenvalue is at most `1e-10 * max(largest eigenvalue, 1)`.
pub fn is_numerically_singular<T: Real>(gram: &Matrix<T>) -> bool {
    if gram.rows() == 0 {
        return true;
    }
    let eig = gram.sym_eigen();
    eig.min() <= T::lit(1e-10) * eig.max().max(T::one())
}

/// Cholesky factor of a Gram matrix that passes [`is_numerically_singular`].
pub fn factor_gram<T: Real>(gram: &Matrix<T>) -> Option<Cholesky<T>> {
    if is_numerically_singular(gram) {
        None
    } else {
        gram.cholesky()
    }
}
