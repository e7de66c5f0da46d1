//! Small dense linear algebra: a row-major matrix and a column-equilibrated
//! Householder QR used for the kernel-weighted least squares solves.
//!
//! The matrices here are tiny (a handful of columns, at most a few thousand rows),
//! so everything is written directly rather than pulled from a BLAS backend.

use std::ops::{Index, IndexMut};

use serde::Serialize;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row slices. All rows must have the same length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Matrix { rows, cols, data }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        self.rows().map(|r| dot(r, v)).collect()
    }

    /// `v' A v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        dot(v, &self.matvec(v))
    }

    pub fn scale(&self, a: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * a).collect(),
        }
    }

    pub fn trace(&self) -> T {
        self.diag().into_iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    /// Adds `scale * v v'` in place.
    pub fn add_outer(&mut self, v: &[T], scale: T) {
        assert_eq!(self.rows, v.len());
        assert_eq!(self.cols, v.len());
        for i in 0..v.len() {
            let vi = v[i] * scale;
            if vi == T::zero() {
                continue;
            }
            for j in 0..v.len() {
                self[(i, j)] += vi * v[j];
            }
        }
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
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

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Householder QR of a weighted design `A` (`n x k`, `n >= k`) with columns
/// rescaled to unit norm first. Keeps `R` and its inverse so that both the
/// least-squares solve and `(A'A)^{-1}` are available without forming `A'A`.
#[derive(Debug, Clone)]
pub struct QrSolver<T> {
    k: usize,
    /// Column scales `S`: the factored matrix is `A S`.
    scales: Vec<T>,
    /// Householder vectors `v_j` (acting on rows `j..n`) and `2 / v_j'v_j`.
    reflectors: Vec<(Vec<T>, T)>,
    r: Matrix<T>,
    r_inv: Matrix<T>,
    rcond: T,
}

/// Reasons a QR factorisation cannot be used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QrFailure {
    /// Fewer rows than columns.
    Underdetermined,
    /// A zero or non-finite pivot, or a zero column.
    Pivot,
}

impl<T: Scalar> QrSolver<T> {
    /// Factors `A`. On success also reports a reciprocal 1-norm condition
    /// estimate of the equilibrated `R`.
    pub fn new(a: &Matrix<T>) -> Result<Self, QrFailure> {
        let (n, k) = (a.nrows(), a.ncols());
        if n < k {
            return Err(QrFailure::Underdetermined);
        }
        // column-major working copy, equilibrated
        let mut cols: Vec<Vec<T>> = (0..k).map(|j| a.column(j)).collect();
        let mut scales = Vec::with_capacity(k);
        for c in cols.iter_mut() {
            let norm = dot(c, c).sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(QrFailure::Pivot);
            }
            let s = T::one() / norm;
            c.iter_mut().for_each(|x| *x *= s);
            scales.push(s);
        }

        let mut r = Matrix::zeros(k, k);
        let mut reflectors = Vec::with_capacity(k);
        let two = T::one() + T::one();
        for j in 0..k {
            let alpha = {
                let tail = &cols[j][j..];
                let norm = dot(tail, tail).sqrt();
                if cols[j][j] > T::zero() {
                    -norm
                } else {
                    norm
                }
            };
            if alpha == T::zero() || !alpha.is_finite() {
                return Err(QrFailure::Pivot);
            }
            // v = x - alpha e1, stored in place of column j's tail
            let mut v: Vec<T> = cols[j][j..].to_vec();
            v[0] -= alpha;
            let vnorm2 = dot(&v, &v);
            r[(j, j)] = alpha;
            let tau = if vnorm2 > T::zero() {
                two / vnorm2
            } else {
                T::zero()
            };
            for c in cols.iter_mut().skip(j + 1) {
                let tail = &mut c[j..];
                let f = tau * dot(&v, tail);
                tail.iter_mut().zip(&v).for_each(|(t, &vi)| *t -= f * vi);
            }
            for (jj, c) in cols.iter().enumerate().skip(j + 1) {
                r[(j, jj)] = c[j];
            }
            reflectors.push((v, tau));
        }

        let r_inv = upper_tri_inverse(&r).ok_or(QrFailure::Pivot)?;
        let rcond = T::one() / (norm1(&r) * norm1(&r_inv));
        if !rcond.is_finite() {
            return Err(QrFailure::Pivot);
        }
        Ok(QrSolver {
            k,
            scales,
            reflectors,
            r,
            r_inv,
            rcond,
        })
    }

    /// Reciprocal condition estimate of `A'A` (square of that of `R`).
    pub fn gram_rcond(&self) -> T {
        self.rcond * self.rcond
    }

    /// `(A'A)^{-1} = S R^{-1} R^{-T} S`.
    pub fn gram_inverse(&self) -> Matrix<T> {
        let k = self.k;
        let mut out = Matrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                // (R^{-1} R^{-T})_{ij} = sum_l Rinv[i,l] Rinv[j,l]
                let mut s = T::zero();
                for l in j.max(i)..k {
                    s += self.r_inv[(i, l)] * self.r_inv[(j, l)];
                }
                let v = s * self.scales[i] * self.scales[j];
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Least-squares solution of `A b = y`: `b = S R^{-1} (Q'y)[..k]`.
    pub fn solve(&self, y: &[T]) -> Vec<T> {
        let mut qty = y.to_vec();
        for (j, (v, tau)) in self.reflectors.iter().enumerate() {
            let tail = &mut qty[j..];
            let f = *tau * dot(v, tail);
            tail.iter_mut().zip(v).for_each(|(t, &vi)| *t -= f * vi);
        }
        let mut x = vec![T::zero(); self.k];
        for i in (0..self.k).rev() {
            let mut acc = qty[i];
            for l in i + 1..self.k {
                acc -= self.r[(i, l)] * x[l];
            }
            x[i] = acc / self.r[(i, i)];
        }
        x.iter_mut()
            .zip(&self.scales)
            .for_each(|(xi, &s)| *xi *= s);
        x
    }
}

fn norm1<T: Scalar>(m: &Matrix<T>) -> T {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).fold(T::zero(), |s, i| s + m[(i, j)].abs()))
        .fold(T::zero(), T::max)
}

fn upper_tri_inverse<T: Scalar>(r: &Matrix<T>) -> Option<Matrix<T>> {
    let k = r.nrows();
    let mut inv = Matrix::zeros(k, k);
    for j in 0..k {
        if r[(j, j)] == T::zero() {
            return None;
        }
        inv[(j, j)] = T::one() / r[(j, j)];
        for i in (0..j).rev() {
            let mut acc = T::zero();
            for l in i + 1..=j {
                acc += r[(i, l)] * inv[(l, j)];
            }
            inv[(i, j)] = -acc / r[(i, i)];
        }
    }
    Some(inv)
}
