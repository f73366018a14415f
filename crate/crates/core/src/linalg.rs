//! Dense complex matrices and the Hermitian factorizations the estimators
//! rely on: eigendecomposition, Cholesky, solves, log-determinants and the
//! PSD square root.
//!
//! Sizes in this crate never exceed a few dozen rows, so everything is a
//! plain row-major `Vec` with no blocking.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense complex matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: fmt::Debug> fmt::Debug for ComplexMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl<T: Real> ComplexMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Real-valued matrix from row-major entries.
    pub fn from_real(rows: usize, cols: usize, data: &[T]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&x| Complex::new(x, T::zero())).collect())
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = Complex::new(d, T::zero());
        }
        m
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<Complex<T>>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Dimension("columns of unequal length".into()));
        }
        Ok(Self::from_fn(rows, columns.len(), |i, j| columns[j][i]))
    }

    /// Outer product `v vᴴ`.
    pub fn outer(v: &[Complex<T>]) -> Self {
        Self::from_fn(v.len(), v.len(), |i, j| v[i] * v[j].conj())
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

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn row(&self, i: usize) -> &[Complex<T>] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<Complex<T>> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn scale_complex(&self, s: Complex<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn trace(&self) -> Complex<T> {
        self.diagonal().into_iter().fold(Complex::zero(), |a, b| a + b)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|z| z.norm()).fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// True when `H[i][j] = conj(H[j][i])` to within `tol` absolute.
    pub fn is_hermitian(&self, tol: T) -> bool {
        if !self.is_square() {
            return false;
        }
        for i in 0..self.rows {
            for j in i..self.cols {
                if (self[(i, j)] - self[(j, i)].conj()).norm() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Averages the matrix with its adjoint and zeroes diagonal imaginary parts.
    pub fn hermitian_part(&self) -> Self {
        let half = T::lit(0.5);
        let mut h = Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)].conj()) * half);
        for i in 0..self.rows {
            h[(i, i)].im = T::zero();
        }
        h
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᴴ` without materializing the adjoint.
    pub fn matmul_adjoint(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by adjoint of {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self::from_fn(self.rows, rhs.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(rhs.row(j))
                .fold(Complex::zero(), |acc, (&a, &b)| acc + a * b.conj())
        }))
    }

    pub fn mat_vec(&self, v: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .fold(Complex::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect())
    }

    /// Real part of `tr(self · rhs)` computed without forming the product.
    pub fn trace_product(&self, rhs: &Self) -> Result<Complex<T>> {
        if self.cols != rhs.rows || self.rows != rhs.cols {
            return Err(Error::Dimension("trace of non-square product".into()));
        }
        let mut acc = Complex::zero();
        for i in 0..self.rows {
            for k in 0..self.cols {
                acc += self[(i, k)] * rhs[(k, i)];
            }
        }
        Ok(acc)
    }

    fn check_same_shape(&self, rhs: &Self) {
        assert!(
            self.rows == rhs.rows && self.cols == rhs.cols,
            "shape mismatch: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            rhs.rows,
            rhs.cols
        );
    }

    /// Adds `s` to every diagonal entry.
    pub fn add_diagonal(&mut self, s: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)].re += s;
        }
    }

    /// Converts the scalar type (through `f64`).
    pub fn cast<U: Real>(&self) -> ComplexMatrix<U> {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|z| Complex::new(U::lit(z.re.to_f64_lossy()), U::lit(z.im.to_f64_lossy())))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for ComplexMatrix<T> {
    type Output = Complex<T>;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for ComplexMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> Add for &ComplexMatrix<T> {
    type Output = ComplexMatrix<T>;
    fn add(self, rhs: Self) -> ComplexMatrix<T> {
        self.check_same_shape(rhs);
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for &ComplexMatrix<T> {
    type Output = ComplexMatrix<T>;
    fn sub(self, rhs: Self) -> ComplexMatrix<T> {
        self.check_same_shape(rhs);
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: Real> Mul for &ComplexMatrix<T> {
    type Output = ComplexMatrix<T>;
    fn mul(self, rhs: Self) -> ComplexMatrix<T> {
        self.matmul(rhs).expect("matrix product shape mismatch")
    }
}

fn require_square<T: Real>(h: &ComplexMatrix<T>, what: &str) -> Result<()> {
    if !h.is_square() {
        return Err(Error::Dimension(format!(
            "{what} needs a square matrix, got {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    if !h.is_finite() {
        return Err(Error::Domain(format!("{what}: matrix has non-finite entries")));
    }
    Ok(())
}

/// Eigendecomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEigen<T> {
    /// Ascending.
    pub eigenvalues: Vec<T>,
    /// Unitary; column `k` pairs with `eigenvalues[k]`.
    pub eigenvectors: ComplexMatrix<T>,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Hermitian eigendecomposition `H = V diag(w) Vᴴ` by cyclic complex Jacobi
/// rotations. Only the Hermitian part of `h` is used.
pub fn hermitian_eig<T: Real>(h: &ComplexMatrix<T>) -> Result<HermitianEigen<T>> {
    require_square(h, "hermitian_eig")?;
    let n = h.rows();
    let mut a = h.hermitian_part();
    let mut v = ComplexMatrix::<T>::identity(n);
    let frob = a.frobenius_norm();
    let eps = T::epsilon();

    let off_norm = |a: &ComplexMatrix<T>| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= eps * frob || off == T::zero() {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::EigenNoConvergence {
                sweeps,
                off_norm: off.to_f64_lossy(),
                frobenius: frob.to_f64_lossy(),
                size: n,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let mag = apq.norm();
                if mag <= T::min_positive_value() {
                    continue;
                }
                // Phase-rotate q so the (p, q) entry is real, then apply a
                // real symmetric Jacobi rotation.
                let phase = apq / mag;
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let tau = (aqq - app) / (T::lit(2.0) * mag);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                // U restricted to (p, q): [[c, s], [-s·conj(phase), c·conj(phase)]]
                let u_pp = Complex::new(c, T::zero());
                let u_pq = Complex::new(s, T::zero());
                let u_qp = -phase.conj() * s;
                let u_qq = phase.conj() * c;

                // A <- A U (columns p, q)
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * u_pp + akq * u_qp;
                    a[(k, q)] = akp * u_pq + akq * u_qq;
                }
                // A <- Uᴴ A (rows p, q)
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = u_pp.conj() * apk + u_qp.conj() * aqk;
                    a[(q, k)] = u_pq.conj() * apk + u_qq.conj() * aqk;
                }
                a[(p, q)] = Complex::zero();
                a[(q, p)] = Complex::zero();
                a[(p, p)].im = T::zero();
                a[(q, q)].im = T::zero();
                // V <- V U
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * u_pp + vkq * u_qp;
                    v[(k, q)] = vkp * u_pq + vkq * u_qq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.partial_cmp(&a[(j, j)].re).expect("finite eigenvalues"));
    let eigenvalues = order.iter().map(|&i| a[(i, i)].re).collect();
    let eigenvectors = ComplexMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(HermitianEigen {
        eigenvalues,
        eigenvectors,
    })
}

/// Lower-triangular Cholesky factor `L` with `L Lᴴ = H` and a real positive
/// diagonal. Only the lower triangle of `h` is read.
pub fn cholesky<T: Real>(h: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    require_square(h, "cholesky")?;
    let n = h.rows();
    let mut l = ComplexMatrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut pivot = h[(j, j)].re;
        for k in 0..j {
            pivot -= l[(j, k)].norm_sqr();
        }
        if !(pivot > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: pivot.to_f64_lossy(),
            });
        }
        let d = pivot.sqrt();
        l[(j, j)] = Complex::new(d, T::zero());
        for i in (j + 1)..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Y = B` then `Lᴴ X = Y` for a Cholesky factor `L`.
pub fn cholesky_solve<T: Real>(l: &ComplexMatrix<T>, b: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, factor is {n}x{n}",
            b.rows()
        )));
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)].re;
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)].conj() * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)].re;
        }
    }
    Ok(x)
}

/// Solves `H X = B` for Hermitian positive-definite `H`.
pub fn solve_hermitian<T: Real>(h: &ComplexMatrix<T>, b: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    let l = cholesky(h)?;
    cholesky_solve(&l, b)
}

/// Inverse of a Hermitian positive-definite matrix, symmetrized.
pub fn inverse_hermitian<T: Real>(h: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    let inv = solve_hermitian(h, &ComplexMatrix::identity(h.rows()))?;
    Ok(inv.hermitian_part())
}

/// `ln det H` for Hermitian positive-definite `H`.
pub fn logdet_hermitian<T: Real>(h: &ComplexMatrix<T>) -> Result<T> {
    let l = cholesky(h)?;
    Ok(logdet_from_cholesky(&l))
}

pub(crate) fn logdet_from_cholesky<T: Real>(l: &ComplexMatrix<T>) -> T {
    T::lit(2.0) * (0..l.rows()).map(|i| l[(i, i)].re.ln()).sum::<T>()
}

/// Hermitian PSD square root `S` with `S Sᴴ = S² = H`.
///
/// Eigenvalues in `[−tol, 0)` are clamped to zero, where `tol` is `1e-10`
/// scaled by the spectral radius (when that exceeds one).
pub fn psd_sqrt<T: Real>(h: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    let eig = hermitian_eig(h)?;
    let scale = eig
        .eigenvalues
        .iter()
        .fold(T::one(), |m, &w| m.max(w.abs()));
    let tol = T::lit(1e-10_f64.max(100.0 * T::TOL_FLOOR)) * scale;
    let n = h.rows();
    let mut roots = Vec::with_capacity(n);
    for &w in &eig.eigenvalues {
        if w < -tol {
            return Err(Error::NotPositiveSemidefinite {
                eigenvalue: w.to_f64_lossy(),
            });
        }
        roots.push(w.max(T::zero()).sqrt());
    }
    let v = &eig.eigenvectors;
    let s = ComplexMatrix::from_fn(n, n, |i, j| {
        (0..n).fold(Complex::zero(), |acc, k| acc + v[(i, k)] * v[(j, k)].conj() * roots[k])
    });
    Ok(s.hermitian_part())
}
