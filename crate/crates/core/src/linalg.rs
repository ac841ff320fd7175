//! Small dense complex linear algebra: the per-bin M×M solves behind fixed beams and oracles.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{msg, Error, Result};
use crate::C64;

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
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
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(msg!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// `v vᴴ`.
    pub fn outer(v: &[C64]) -> Self {
        Self::from_fn(v.len(), v.len(), |i, j| v[i] * v[j].conj())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// `self + shift·I`.
    pub fn add_diagonal(&self, shift: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += shift;
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Largest |A − Aᴴ| entry.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Solves `A x = b` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[C64]) -> Result<Vec<C64>> {
        let sol = self.solve_matrix(&Self { rows: b.len(), cols: 1, data: b.to_vec() })?;
        Ok(sol.data)
    }

    /// Solves `A X = B` for a matrix right-hand side.
    pub fn solve_matrix(&self, b: &Self) -> Result<Self> {
        if !self.is_square() || b.rows != self.rows {
            return Err(Error::Shape(msg!(
                "cannot solve {}x{} system with {}x{} right-hand side",
                self.rows,
                self.cols,
                b.rows,
                b.cols
            )));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut x = b.clone();
        let scale = self.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Err(Error::Numerical(msg!("singular {n}x{n} system (zero matrix)")));
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r1, &r2| a[(r1, col)].norm().total_cmp(&a[(r2, col)].norm()))
                .unwrap_or(col);
            if a[(pivot, col)].norm() <= scale * 1e-14 {
                return Err(Error::Numerical(msg!("singular {n}x{n} system at column {col}")));
            }
            if pivot != col {
                a.swap_rows(pivot, col);
                x.swap_rows(pivot, col);
            }
            let inv = a[(col, col)].inv();
            for r in col + 1..n {
                let factor = a[(r, col)] * inv;
                if factor == C64::new(0.0, 0.0) {
                    continue;
                }
                for c in col..n {
                    let v = a[(col, c)];
                    a[(r, c)] -= factor * v;
                }
                for c in 0..x.cols {
                    let v = x[(col, c)];
                    x[(r, c)] -= factor * v;
                }
            }
        }
        for col in (0..n).rev() {
            let inv = a[(col, col)].inv();
            for c in 0..x.cols {
                let mut acc = x[(col, c)];
                for k in col + 1..n {
                    acc -= a[(col, k)] * x[(k, c)];
                }
                x[(col, c)] = acc * inv;
            }
        }
        if !x.is_finite() {
            return Err(Error::Numerical(msg!("non-finite solution of {n}x{n} system")));
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.solve_matrix(&Self::identity(self.rows))
    }

    /// Lower-triangular `L` with `L Lᴴ = A` for Hermitian positive-definite `A`.
    pub fn cholesky(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::Shape(msg!("cholesky of non-square {}x{}", self.rows, self.cols)));
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical(msg!("matrix not positive definite (pivot {j} = {d:e})")));
            }
            let djj = libm::sqrt(d);
            l[(j, j)] = C64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(l)
    }

    fn swap_rows(&mut self, r1: usize, r2: usize) {
        for c in 0..self.cols {
            self.data.swap(r1 * self.cols + c, r2 * self.cols + c);
        }
    }
}

impl core::ops::Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `aᴴ b`.
pub fn dot_h(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Dominant eigenvector of a Hermitian PSD matrix by power iteration, normalized so that
/// element `anchor` is real and positive.
pub fn principal_eigenvector(a: &CMatrix, anchor: usize, iterations: usize) -> Result<Vec<C64>> {
    let n = a.rows();
    let mut v = vec![C64::new(1.0, 0.0); n];
    for _ in 0..iterations {
        let w = a.mul_vec(&v);
        let nrm = libm::sqrt(norm_sqr(&w));
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::Numerical(msg!("power iteration collapsed")));
        }
        v = w.into_iter().map(|z| z / nrm).collect();
    }
    let phase = v[anchor];
    if phase.norm() == 0.0 {
        return Err(Error::Numerical(msg!("principal eigenvector vanishes at the anchor")));
    }
    let rot = phase.conj() / phase.norm();
    Ok(v.into_iter().map(|z| z * rot).collect())
}
