//! Small dense complex matrices.
//!
//! Everything here is row-major and sized for the handful of antennas and
//! users in a single cell, so there is no blocking or SIMD. The Cholesky
//! routines operate on raw slices because the autodiff solve and the
//! classical WMMSE solver must run the exact same arithmetic.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};

pub type C64 = Complex64;

/// Relative tolerance on `|A - A^H|` accepted by the Hermitian solver.
pub const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from interleaved `(re, im)` pairs.
    pub fn from_interleaved(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != 2 * rows * cols {
            return dim_err(format!(
                "{} reals for a {rows}x{cols} complex matrix",
                values.len()
            ));
        }
        let data = values
            .chunks_exact(2)
            .map(|p| C64::new(p[0], p[1]))
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.data.len());
        self.extend_interleaved(&mut out);
        out
    }

    pub fn extend_interleaved(&self, out: &mut Vec<f64>) {
        for z in &self.data {
            out.push(z.re);
            out.push(z.im);
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return dim_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        kernels::matmul(&self.data, &rhs.data, self.rows, self.cols, rhs.cols, &mut out.data);
        Ok(out)
    }

    pub fn conj_transpose(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scale(&self, s: f64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.shape() != rhs.shape() {
            return dim_err(format!("add {:?} and {:?}", self.shape(), rhs.shape()));
        }
        Ok(CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, rhs: &CMatrix) -> f64 {
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Row-major kernels shared by the plain solvers and the autodiff graph.
/// Both paths must produce bit-identical results, so neither may inline
/// its own variant of these loops.
pub mod kernels {
    use super::C64;

    /// `out = a (m x k) * b (k x n)`; `out` is overwritten.
    pub fn matmul(a: &[C64], b: &[C64], m: usize, k: usize, n: usize, out: &mut [C64]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for v in out.iter_mut() {
            *v = C64::new(0.0, 0.0);
        }
        for i in 0..m {
            for p in 0..k {
                let x = a[i * k + p];
                for j in 0..n {
                    out[i * n + j] += x * b[p * n + j];
                }
            }
        }
    }

    /// Conjugate transpose of an `r x c` matrix.
    pub fn conj_transpose(a: &[C64], r: usize, c: usize, out: &mut [C64]) {
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j].conj();
            }
        }
    }

    /// Scales row `i` of an `r x c` matrix by the real `s[i]`.
    pub fn row_scale_real(a: &[C64], s: &[f64], c: usize, out: &mut [C64]) {
        for (i, &si) in s.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] = a[i * c + j] * si;
            }
        }
    }

    /// Scales column `j` of an `r x c` matrix by the complex `s[j]`.
    pub fn col_scale(a: &[C64], s: &[C64], r: usize, out: &mut [C64]) {
        let c = s.len();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = a[i * c + j] * s[j];
            }
        }
    }

    /// Rescales `w` in place to squared Frobenius norm `p`; returns the
    /// norm before scaling.
    pub fn power_normalize(w: &mut [C64], p: f64) -> f64 {
        let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let s = p.sqrt() / norm;
        for z in w.iter_mut() {
            *z *= s;
        }
        norm
    }
}

/// In-place Cholesky factorization `A = L L^H` of an `n x n` row-major
/// Hermitian positive-definite matrix. On success the lower triangle holds
/// `L` and the strict upper triangle is zeroed.
pub fn cholesky_in_place(a: &mut [C64], n: usize) -> Result<()> {
    if a.len() != n * n {
        return dim_err(format!("cholesky on {} elements, n = {n}", a.len()));
    }
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !scale.is_finite() {
        return Err(Error::NonFinite("cholesky input".into()));
    }
    for i in 0..n {
        for j in 0..i {
            let asym = (a[i * n + j] - a[j * n + i].conj()).norm();
            if asym > HERMITIAN_TOL * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::NotPositiveDefinite(format!(
                    "asymmetry {asym:.3e} at ({i}, {j})"
                )));
            }
        }
    }
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "non-positive pivot {d:.3e} at {j}"
            )));
        }
        let d = d.sqrt();
        a[j * n + j] = C64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = C64::new(0.0, 0.0);
        }
    }
    Ok(())
}

/// Solves `L L^H X = B` in place for `B` of shape `n x ncols`.
pub fn cholesky_solve_in_place(l: &[C64], n: usize, b: &mut [C64], ncols: usize) {
    debug_assert_eq!(b.len(), n * ncols);
    for c in 0..ncols {
        // forward: L y = b
        for i in 0..n {
            let mut s = b[i * ncols + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * ncols + c];
            }
            b[i * ncols + c] = s / l[i * n + i].re;
        }
        // backward: L^H x = y
        for i in (0..n).rev() {
            let mut s = b[i * ncols + c];
            for k in i + 1..n {
                s -= l[k * n + i].conj() * b[k * ncols + c];
            }
            b[i * ncols + c] = s / l[i * n + i].re;
        }
    }
}

/// Solves `A X = B` for Hermitian positive-definite `A` without forming an
/// inverse.
pub fn hpd_solve(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return dim_err(format!(
            "hpd_solve with A {:?} and B {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut l = a.data().to_vec();
    cholesky_in_place(&mut l, n)?;
    let mut x = b.clone();
    cholesky_solve_in_place(&l, n, x.data_mut(), b.cols());
    Ok(x)
}
