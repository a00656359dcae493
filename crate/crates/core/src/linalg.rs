//! Small dense linear algebra used by the simulator and the sandwich
//! information estimates.

use crate::error::{numeric, Result};
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        T::gemm(self.rows, self.cols, other.cols, &self.data, &other.data, &mut out.data);
        out
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Self {
        assert_eq!(self.rows, self.cols);
        let half = T::lit(0.5);
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = half * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower Cholesky factor `L` with `A = L L^T`; fails if a pivot is not
/// strictly positive.
pub fn cholesky<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if n != a.cols() {
        return Err(numeric("cholesky of a non-square matrix"));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(numeric(format!("matrix not positive definite at pivot {j}")));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky factorization with diagonal jitter `jitter * mean(diag)`,
/// escalated by a factor of ten up to three times on failure.
pub fn cholesky_jittered<T: Real>(a: &Matrix<T>, jitter: T) -> Result<(Matrix<T>, T)> {
    let n = a.rows();
    let scale = if n == 0 { T::one() } else { a.trace() / T::lit(n as f64) };
    let mut eps = jitter;
    let mut last_err = None;
    for _ in 0..4 {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += eps * scale;
        }
        match cholesky(&m) {
            Ok(l) => return Ok((l, eps)),
            Err(e) => last_err = Some(e),
        }
        eps = if eps > T::zero() { eps * T::lit(10.0) } else { T::epsilon() };
    }
    Err(last_err.unwrap_or_else(|| numeric("cholesky failed")))
}

/// Solves `L L^T x = b` given the lower factor.
pub fn cholesky_solve<T: Real>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are eigenvectors.
pub fn symmetric_eigen<T: Real>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        let total: T = m.as_slice().iter().map(|x| *x * *x).sum();
        if off <= T::epsilon() * T::epsilon() * total || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
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
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix, discarding
/// eigenvalues below `rel_cutoff * max|eig|`.
pub fn symmetric_pinv<T: Real>(a: &Matrix<T>, rel_cutoff: T) -> Matrix<T> {
    let n = a.rows();
    let (eig, v) = symmetric_eigen(a);
    let top = eig.iter().fold(T::zero(), |m, e| m.max(e.abs()));
    let mut out = Matrix::zeros(n, n);
    for (k, &e) in eig.iter().enumerate() {
        if e.abs() <= rel_cutoff * top || e == T::zero() {
            continue;
        }
        let inv = T::one() / e;
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += v[(i, k)] * inv * v[(j, k)];
            }
        }
    }
    out
}
