//! Dense linear-algebra kernels.
//!
//! [`Matrix`] stores entries row-major and, throughout the crate, holds one
//! sample per column: a feature block of width `k` over `n` samples is a
//! `k × n` matrix. Products go through `matrixmultiply`'s strided GEMM so
//! transposed operands never need to be materialized.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = self.row(r);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.6}")).collect();
            let tail = if self.cols > 8 { ", ..." } else { "" };
            writeln!(f, "  [{}{}]", shown.join(", "), tail)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::input(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// i.i.d. standard Gaussian entries drawn in row-major order.
    pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row block out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns picked by index, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |r, c| self[(r, idx[c])])
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        gemm(self, true, other, false)
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ: {:?} vs {:?}", a.shape(), b.shape());
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: the strides describe in-bounds views of `a.data`, `b.data` and
    // `c.data`, whose lengths are rows*cols for their declared shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Ridge strength for least-squares solves.
///
/// An absolute ridge adds `value · I` to the normalized Gram matrix
/// `(1/n)·F·Fᵀ`. A relative ridge scales `value` by the mean diagonal of that
/// Gram matrix first, so it tracks the feature scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeParam {
    value: f64,
    relative: bool,
}

impl RidgeParam {
    pub const ZERO: RidgeParam = RidgeParam { value: 0.0, relative: false };

    pub fn absolute(value: f64) -> Result<Self> {
        Self::checked(value, false)
    }

    pub fn relative(value: f64) -> Result<Self> {
        Self::checked(value, true)
    }

    fn checked(value: f64, relative: bool) -> Result<Self> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::config(format!("ridge must be finite and >= 0, got {value}")));
        }
        Ok(Self { value, relative })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_relative(&self) -> bool {
        self.relative
    }

    pub fn is_zero(&self) -> bool {
        self.value == 0.0
    }

    /// Absolute ridge for a Gram matrix with the given mean diagonal.
    pub fn effective(&self, mean_diag: f64) -> f64 {
        if self.relative {
            self.value * mean_diag
        } else {
            self.value
        }
    }
}

impl Default for RidgeParam {
    /// 1e-10 relative to the mean Gram diagonal.
    fn default() -> Self {
        RidgeParam { value: 1e-10, relative: true }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Fails when a pivot drops below `k·ε` times the largest diagonal entry,
/// which is how exactly-singular Gram matrices show up in floating point.
pub fn cholesky(g: &Matrix) -> Result<Matrix> {
    let k = g.rows();
    if g.cols() != k {
        return Err(Error::input("cholesky needs a square matrix"));
    }
    let max_diag = (0..k).fold(0.0f64, |m, i| m.max(g[(i, i)]));
    let floor = max_diag * f64::EPSILON * (k.max(1) as f64);
    let mut l = Matrix::zeros(k, k);
    for j in 0..k {
        let mut d = g[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if !(d > floor) {
            return Err(Error::Singular(format!("pivot {j} is {d:e} (max diagonal {max_diag:e})")));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..k {
            let mut s = g[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `X · G = C` for symmetric positive definite `G` given its
/// Cholesky factor, i.e. returns `C · G⁻¹`.
fn solve_right_with_factor(c: &Matrix, l: &Matrix) -> Matrix {
    let k = l.rows();
    let mut x = c.clone();
    // Each row x of the result solves G xᵀ = cᵀ.
    for r in 0..x.rows() {
        let row = &mut x.data[r * k..(r + 1) * k];
        for i in 0..k {
            let mut s = row[i];
            for p in 0..i {
                s -= l[(i, p)] * row[p];
            }
            row[i] = s / l[(i, i)];
        }
        for i in (0..k).rev() {
            let mut s = row[i];
            for p in (i + 1)..k {
                s -= l[(p, i)] * row[p];
            }
            row[i] = s / l[(i, i)];
        }
    }
    x
}

/// Returns `C · (G + r·I)⁻¹` for a symmetric PSD moment matrix `G`, where `r`
/// comes from `ridge`.
///
/// An all-zero `G` under a relative ridge yields the zero matrix: the
/// minimum-norm solution when no feature carries signal.
pub fn solve_ridged(c: &Matrix, g: &Matrix, ridge: RidgeParam) -> Result<Matrix> {
    let k = g.rows();
    if g.cols() != k || c.cols() != k {
        return Err(Error::input(format!(
            "ridged solve shape mismatch: rhs {:?}, gram {:?}",
            c.shape(),
            g.shape()
        )));
    }
    if k == 0 {
        return Ok(Matrix::zeros(c.rows(), 0));
    }
    let mean_diag = g.trace() / k as f64;
    if mean_diag == 0.0 && ridge.is_relative() && !ridge.is_zero() {
        return Ok(Matrix::zeros(c.rows(), k));
    }
    let r = ridge.effective(mean_diag);
    let mut gr = g.clone();
    for i in 0..k {
        gr[(i, i)] += r;
    }
    let l = cholesky(&gr)?;
    Ok(solve_right_with_factor(c, &l))
}

/// `(1/n)·F·Fᵀ`, symmetrized.
pub fn second_moment(f: &Matrix) -> Result<Matrix> {
    let n = f.cols();
    if n == 0 {
        return Err(Error::input("second moment of an empty sample"));
    }
    let mut g = f.matmul_nt(f).scale(1.0 / n as f64);
    g.symmetrize();
    Ok(g)
}

/// `(1/n)·A·Bᵀ` for two blocks over the same samples.
pub fn cross_moment(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::input(format!(
            "sample counts differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.cols() == 0 {
        return Err(Error::input("cross moment of an empty sample"));
    }
    Ok(a.matmul_nt(b).scale(1.0 / a.cols() as f64))
}

/// Regularized least squares `min_W (1/n)‖T − W·F‖² + ridge·‖W‖²`.
///
/// Closed form `T·Fᵀ·(F·Fᵀ + n·ridge·I)⁻¹` evaluated through a Cholesky
/// factorization of the normalized Gram matrix. Returns an `m × k` matrix.
pub fn fit_linear_ls(features: &Matrix, targets: &Matrix, ridge: RidgeParam) -> Result<Matrix> {
    if features.cols() != targets.cols() {
        return Err(Error::input(format!(
            "features have {} samples, targets {}",
            features.cols(),
            targets.cols()
        )));
    }
    if features.cols() == 0 {
        return Err(Error::input("least squares on an empty sample"));
    }
    let gram = second_moment(features)?;
    let rhs = cross_moment(targets, features)?;
    solve_ridged(&rhs, &gram, ridge)
}

/// Empirical partial covariance `Ê[fzᵀ] − Ê[fyᵀ]·(Ê[yyᵀ])⁻¹·Ê[yzᵀ]`, with the
/// ridge applied to `Ê[yyᵀ]`.
pub fn partial_covariance(f: &Matrix, z: &Matrix, y: &Matrix, ridge: RidgeParam) -> Result<Matrix> {
    let n = f.cols();
    if z.cols() != n || y.cols() != n {
        return Err(Error::input(format!(
            "sample counts differ: f {n}, z {}, y {}",
            z.cols(),
            y.cols()
        )));
    }
    let fz = cross_moment(f, z)?;
    let fy = cross_moment(f, y)?;
    let yz = cross_moment(y, z)?;
    let yy = second_moment(y)?;
    let k = solve_ridged(&fy, &yy, ridge)?;
    Ok(&fz - &k.matmul(&yz))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::input("orthogonal matrix of dimension 0"));
    }
    let g = Matrix::standard_normal(d, d, rng).to_nalgebra();
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(Matrix::from_nalgebra(&q))
}

/// `S^{-1/2}` for a symmetric positive definite `S` via eigendecomposition.
pub fn inverse_sqrt_spd(s: &Matrix) -> Result<Matrix> {
    if s.rows() != s.cols() {
        return Err(Error::input("inverse square root needs a square matrix"));
    }
    let eig = s.to_nalgebra().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| !(v > max * 1e-14)) {
        return Err(Error::Singular(format!("eigenvalue {bad:e} is not positive")));
    }
    let inv_sqrt = nalgebra::DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| 1.0 / v.sqrt()),
    );
    let v = &eig.eigenvectors;
    let m = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
    let mut out = Matrix::from_nalgebra(&m);
    out.symmetrize();
    Ok(out)
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let svd = m.to_nalgebra().svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    m.to_nalgebra().symmetric_eigen().eigenvalues.iter().copied().collect()
}

pub fn determinant(m: &Matrix) -> f64 {
    m.to_nalgebra().determinant()
}
