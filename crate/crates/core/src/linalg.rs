//! Small dense linear algebra: a row-major matrix, Cholesky, pivoted QR
//! least squares and a Jacobi symmetric eigensolver.
//!
//! Every reduction runs in a fixed order so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::scalar::{dot, Scalar};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(invalid(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * rhs`, parallel over output rows.
    pub fn matmul(&self, rhs: &Mat<T>) -> Result<Mat<T>> {
        if self.cols != rhs.rows {
            return Err(invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.cols;
        let mut out = Mat::zeros(self.rows, n);
        if n == 0 {
            return Ok(out);
        }
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| {
                let arow = self.row(i);
                for (k, &a) in arow.iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    let brow = rhs.row(k);
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += a * b;
                    }
                }
            });
        Ok(out)
    }

    /// Adds `v` to every diagonal entry.
    pub fn add_diagonal(&mut self, v: T) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += v;
        }
    }

    pub fn max_abs_diff(&self, other: &Mat<T>) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Largest `|a_ij - a_ji|`; `None` when not square.
    pub fn asymmetry(&self) -> Option<T> {
        if !self.is_square() {
            return None;
        }
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        Some(worst)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Mat<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Returns `None` if `a` is not numerically positive definite.
    pub fn factor(a: &Mat<T>) -> Option<Self> {
        if !a.is_square() {
            return None;
        }
        let n = a.rows();
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            {
                let lj = &l.row(j)[..j];
                d -= dot(lj, lj);
            }
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            // rows below j are independent given columns < j
            let (head, tail) = l.data.split_at_mut((j + 1) * n);
            let lj = &head[j * n..j * n + j];
            tail.par_chunks_mut(n).enumerate().for_each(|(off, row)| {
                let i = j + 1 + off;
                let s = a[(i, j)] - dot(&row[..j], lj);
                row[j] = s / djj;
            });
        }
        Some(Self { l })
    }

    pub fn lower(&self) -> &Mat<T> {
        &self.l
    }

    /// Solves `L Y = B` in place, column-parallel.
    pub fn forward_solve(&self, b: &Mat<T>) -> Mat<T> {
        let bt = b.transpose();
        let n = self.l.rows();
        let mut yt = bt;
        yt.data.par_chunks_mut(n.max(1)).for_each(|col| {
            for i in 0..n {
                let s = col[i] - dot(&self.l.row(i)[..i], &col[..i]);
                col[i] = s / self.l[(i, i)];
            }
        });
        yt.transpose()
    }

    /// Solves `L Lᵀ X = B`.
    pub fn solve(&self, b: &Mat<T>) -> Mat<T> {
        let n = self.l.rows();
        let mut xt = b.transpose();
        xt.data.par_chunks_mut(n.max(1)).for_each(|col| {
            for i in 0..n {
                let s = col[i] - dot(&self.l.row(i)[..i], &col[..i]);
                col[i] = s / self.l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * col[k];
                }
                col[i] = s / self.l[(i, i)];
            }
        });
        xt.transpose()
    }
}

/// Minimum-residual solution of `A X = B` by Householder QR with column
/// pivoting. Columns whose pivot falls below `rcond * |r_00|` are treated as
/// rank deficient and their unknowns set to zero.
pub fn least_squares<T: Scalar>(a: &Mat<T>, b: &Mat<T>, rcond: T) -> Result<Mat<T>> {
    if a.rows() != b.rows() {
        return Err(invalid(format!(
            "least squares shape mismatch: A has {} rows, B has {}",
            a.rows(),
            b.rows()
        )));
    }
    let (m, n) = (a.rows(), a.cols());
    let nrhs = b.cols();
    let mut r = a.clone();
    let mut qtb = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut col_norms: Vec<T> = (0..n)
        .map(|j| (0..m).map(|i| r[(i, j)] * r[(i, j)]).sum::<T>())
        .collect();
    let steps = m.min(n);
    let mut rank = 0;
    let mut r00 = T::zero();
    for k in 0..steps {
        // pivot on the largest remaining column norm
        let (p, _) = col_norms
            .iter()
            .enumerate()
            .skip(k)
            .fold((k, T::neg_infinity()), |best, (j, &v)| {
                if v > best.1 {
                    (j, v)
                } else {
                    best
                }
            });
        if p != k {
            col_norms.swap(p, k);
            perm.swap(p, k);
            for i in 0..m {
                let t = r[(i, p)];
                r[(i, p)] = r[(i, k)];
                r[(i, k)] = t;
            }
        }
        let mut alpha = T::zero();
        for i in k..m {
            alpha += r[(i, k)] * r[(i, k)];
        }
        let alpha = alpha.sqrt();
        if k == 0 {
            r00 = alpha;
        }
        if alpha <= rcond * r00 || alpha == T::zero() {
            break;
        }
        rank += 1;
        let sign = if r[(k, k)] >= T::zero() { T::one() } else { -T::one() };
        let mut v: Vec<T> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] += sign * alpha;
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for j in k..n {
            let s: T = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
            let f = two * s / vnorm2;
            for i in k..m {
                r[(i, j)] -= f * v[i - k];
            }
        }
        for j in 0..nrhs {
            let s: T = (k..m).map(|i| v[i - k] * qtb[(i, j)]).sum();
            let f = two * s / vnorm2;
            for i in k..m {
                qtb[(i, j)] -= f * v[i - k];
            }
        }
        for j in (k + 1)..n {
            let mut s = T::zero();
            for i in (k + 1)..m {
                s += r[(i, j)] * r[(i, j)];
            }
            col_norms[j] = s;
        }
    }
    let mut x = Mat::zeros(n, nrhs);
    for j in 0..nrhs {
        let mut z = vec![T::zero(); n];
        for i in (0..rank).rev() {
            let mut s = qtb[(i, j)];
            for k in (i + 1)..rank {
                s -= r[(i, k)] * z[k];
            }
            z[i] = s / r[(i, i)];
        }
        for (i, &pi) in perm.iter().enumerate() {
            x[(pi, j)] = z[i];
        }
    }
    Ok(x)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the returned matrix.
pub fn symmetric_eigen<T: Scalar>(a: &Mat<T>) -> Result<(Vec<T>, Mat<T>)> {
    if !a.is_square() {
        return Err(invalid("eigen-decomposition needs a square matrix"));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += m[(i, i)] * m[(i, i)];
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= eps * eps * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
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
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((vals, vecs))
}
