//! Dense real linear algebra at 64-bit precision.
//!
//! [`Matrix`] stores its entries row-major. Constructors reject NaN and
//! infinity; arithmetic between finite matrices is assumed to stay finite
//! and is not re-checked.

mod eigen;
mod svd;

pub use eigen::{sym_eigh, EigenSystem};
pub use svd::{thin_svd, SvdSelection, SvdSystem};
pub(crate) use svd::scale_columns as svd_scale_columns;

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Tolerance used by [`project`] when verifying that a basis is orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl core::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidShape { rows, cols, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "Matrix::from_vec".into() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidShape { rows: rows.len(), cols, len: data.len() + r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// A single column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    /// Builds a matrix entry by entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// All-zero matrix. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square matrix with `values` on the diagonal.
    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::InvalidShape { rows: 0, cols: 0, len: 0 });
        }
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        if !m.is_finite() {
            return Err(Error::NonFinite { context: "Matrix::diag".into() });
        }
        Ok(m)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false: constructors refuse empty matrices.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw row-major storage. Callers are responsible
    /// for keeping the entries finite.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Matrix> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.cols) {
            return Err(Error::InvalidArgument("column selection out of range".into()));
        }
        let mut out = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            out.extend(cols.iter().map(|&c| row[c]));
        }
        Ok(Matrix::from_raw(self.rows, cols.len(), out))
    }

    /// Columns `start..end`.
    pub fn column_range(&self, start: usize, end: usize) -> Result<Matrix> {
        let cols: Vec<usize> = (start..end).collect();
        self.select_columns(&cols)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self += s * other`.
    pub fn add_scaled_in_place(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch { op: "add_scaled", left: self.shape(), right: other.shape() });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch { op, left: self.shape(), right: other.shape() });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.frobenius_sq())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute entrywise difference; `f64::INFINITY` on a shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| if (a - b).abs() > m { (a - b).abs() } else { m })
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest `|m[i][j] - m[j][i]|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `(self + selfᵀ) / 2`; square matrices only.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::NotSquare { rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// Sum of each row, i.e. `self · 1`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    /// `selfᵀ · self`, exploiting symmetry of the result.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut out = vec![0.0; n * n];
        for k in 0..self.rows {
            let row = self.row(k);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let dst = &mut out[i * n..(i + 1) * n];
                for j in i..n {
                    dst[j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                out[i * n + j] = out[j * n + i];
            }
        }
        Matrix::from_raw(n, n, out)
    }

    /// `self · selfᵀ`.
    pub fn outer_gram(&self) -> Matrix {
        let n = self.rows;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let ri = self.row(i);
            for j in i..n {
                let v = dot(ri, self.row(j));
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        Matrix::from_raw(n, n, out)
    }

    /// Numerical rank: singular values above `tol · σ_max`.
    pub fn numerical_rank(&self, tol: f64) -> Result<usize> {
        let k = self.rows.min(self.cols);
        let svd = thin_svd(self, k, SvdSelection::Top)?;
        let smax = svd.singular_values.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return Ok(0);
        }
        Ok(svd.singular_values.iter().filter(|&&s| s > tol * smax).count())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matrix product `a · b`.
///
/// Uses an i-k-j loop so the inner loop streams contiguous rows of `b`; the
/// summation order is fixed, so results are deterministic.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.rows, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch { op: "matmul_tn", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (d, &bkj) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *d += aki * bkj;
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch { op: "matmul_nt", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.rows, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(ar, b.row(j));
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// Largest deviation of `basisᵀ·basis` from the identity.
pub fn orthonormality_error(basis: &Matrix) -> f64 {
    let g = basis.gram();
    let mut worst = 0.0f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.get(i, j) - target).abs());
        }
    }
    worst
}

/// Orthogonal projection of the columns of `y` onto the span of `basis`:
/// `basis · basisᵀ · y`.
///
/// The basis must have orthonormal columns (checked to [`ORTHONORMAL_TOL`]).
pub fn project(basis: &Matrix, y: &Matrix) -> Result<Matrix> {
    if basis.rows != y.rows {
        return Err(Error::DimensionMismatch { op: "project", left: basis.shape(), right: y.shape() });
    }
    let dev = orthonormality_error(basis);
    if dev > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal { max_deviation: dev });
    }
    let coords = matmul_tn(basis, y)?;
    matmul(basis, &coords)
}
