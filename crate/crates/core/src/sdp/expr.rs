//! Affine expressions in the scalar decision variables of an [`SdpProblem`].
//!
//! [`SdpProblem`]: super::SdpProblem

use super::SdpError;
use crate::linalg::Matrix;
use std::ops::{Add, Neg, Sub};

/// `constant + Σ coef · x[var]`, terms sorted by variable index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    terms: Vec<(usize, f64)>,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn var(index: usize) -> Self {
        Self {
            constant: 0.0,
            terms: vec![(index, 1.0)],
        }
    }

    pub fn from_terms(constant: f64, terms: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut terms: Vec<(usize, f64)> = terms.into_iter().collect();
        terms.sort_unstable_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (i, c) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        Self {
            constant,
            terms: merged,
        }
    }

    pub fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    pub fn scale(&self, alpha: f64) -> Self {
        if alpha == 0.0 {
            return Self::default();
        }
        Self {
            constant: self.constant * alpha,
            terms: self.terms.iter().map(|&(i, c)| (i, c * alpha)).collect(),
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &LinExpr) {
        if alpha == 0.0 {
            return;
        }
        self.constant += alpha * other.constant;
        if other.terms.is_empty() {
            return;
        }
        let mut out = Vec::with_capacity(self.terms.len() + other.terms.len());
        let (mut a, mut b) = (0, 0);
        while a < self.terms.len() || b < other.terms.len() {
            let ta = self.terms.get(a);
            let tb = other.terms.get(b);
            match (ta, tb) {
                (Some(&(i, c)), Some(&(j, d))) if i == j => {
                    let v = c + alpha * d;
                    if v != 0.0 {
                        out.push((i, v));
                    }
                    a += 1;
                    b += 1;
                }
                (Some(&(i, c)), Some(&(j, _))) if i < j => {
                    out.push((i, c));
                    a += 1;
                }
                (Some(&(i, c)), None) => {
                    out.push((i, c));
                    a += 1;
                }
                (_, Some(&(j, d))) => {
                    out.push((j, alpha * d));
                    b += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        self.terms = out;
    }

    /// Product of two expressions; fails unless one side is constant.
    pub fn mul(&self, other: &LinExpr) -> Result<LinExpr, SdpError> {
        if self.is_constant() {
            Ok(other.scale(self.constant))
        } else if other.is_constant() {
            Ok(self.scale(other.constant))
        } else {
            Err(SdpError::NonAffine)
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }

    fn approx_eq(&self, other: &LinExpr, tol: f64) -> bool {
        let mut d = self.clone();
        d.axpy(-1.0, other);
        d.constant.abs() <= tol && d.terms.iter().all(|t| t.1.abs() <= tol)
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self.axpy(1.0, &rhs);
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: LinExpr) -> LinExpr {
        self.axpy(-1.0, &rhs);
        self
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self.scale(-1.0)
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        LinExpr::constant(c)
    }
}

/// Dense matrix of [`LinExpr`] entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<LinExpr>,
}

impl AffineMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![LinExpr::default(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(&Matrix::identity(n, n))
    }

    pub fn constant(m: &Matrix) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.entries[i * m.ncols() + j] = LinExpr::constant(m[(i, j)]);
            }
        }
        out
    }

    /// `expr · I_n` for a scalar expression.
    pub fn scaled_identity(expr: &LinExpr, n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out.entries[i * n + i] = expr.clone();
        }
        out
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> LinExpr) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, e: LinExpr) {
        self.entries[i * self.cols + j] = e;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| e.scale(alpha)).collect(),
        }
    }

    fn check_same(&self, other: &AffineMatrix, op: &str) -> Result<(), SdpError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(SdpError::DimensionMismatch(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &AffineMatrix) -> Result<Self, SdpError> {
        self.check_same(other, "sum")?;
        let mut out = self.clone();
        for (a, b) in out.entries.iter_mut().zip(&other.entries) {
            a.axpy(1.0, b);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &AffineMatrix) -> Result<Self, SdpError> {
        self.check_same(other, "difference")?;
        let mut out = self.clone();
        for (a, b) in out.entries.iter_mut().zip(&other.entries) {
            a.axpy(-1.0, b);
        }
        Ok(out)
    }

    /// `C · self`.
    pub fn left_mul(&self, c: &Matrix) -> Result<Self, SdpError> {
        if c.ncols() != self.rows {
            return Err(SdpError::DimensionMismatch(format!(
                "product of {}x{} constant and {}x{} expression",
                c.nrows(),
                c.ncols(),
                self.rows,
                self.cols
            )));
        }
        let mut out = Self::zeros(c.nrows(), self.cols);
        for i in 0..c.nrows() {
            for k in 0..self.rows {
                let v = c[(i, k)];
                if v == 0.0 {
                    continue;
                }
                for j in 0..self.cols {
                    out.entries[i * self.cols + j].axpy(v, &self.entries[k * self.cols + j]);
                }
            }
        }
        Ok(out)
    }

    /// `self · C`.
    pub fn right_mul(&self, c: &Matrix) -> Result<Self, SdpError> {
        if c.nrows() != self.cols {
            return Err(SdpError::DimensionMismatch(format!(
                "product of {}x{} expression and {}x{} constant",
                self.rows,
                self.cols,
                c.nrows(),
                c.ncols()
            )));
        }
        let mut out = Self::zeros(self.rows, c.ncols());
        for i in 0..self.rows {
            for k in 0..self.cols {
                let e = &self.entries[i * self.cols + k];
                if e.is_zero() {
                    continue;
                }
                for j in 0..c.ncols() {
                    let v = c[(k, j)];
                    if v != 0.0 {
                        out.entries[i * c.ncols() + j].axpy(v, e);
                    }
                }
            }
        }
        Ok(out)
    }

    /// General product; every scalar product must have a constant factor.
    pub fn mul(&self, other: &AffineMatrix) -> Result<Self, SdpError> {
        if self.cols != other.rows {
            return Err(SdpError::DimensionMismatch(format!(
                "product of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let b = other.get(k, j);
                    if b.is_zero() {
                        continue;
                    }
                    let p = a.mul(b)?;
                    out.entries[i * other.cols + j].axpy(1.0, &p);
                }
            }
        }
        Ok(out)
    }

    /// Assembles a block matrix; `None` entries are zero blocks. Every block
    /// row needs at least one `Some` to fix its height, likewise for columns.
    pub fn block(parts: &[Vec<Option<&AffineMatrix>>]) -> Result<Self, SdpError> {
        let nbr = parts.len();
        let nbc = parts.first().map(|r| r.len()).unwrap_or(0);
        let mut heights = vec![None; nbr];
        let mut widths = vec![None; nbc];
        for (bi, row) in parts.iter().enumerate() {
            if row.len() != nbc {
                return Err(SdpError::DimensionMismatch("ragged block layout".into()));
            }
            for (bj, part) in row.iter().enumerate() {
                if let Some(m) = part {
                    for (slot, v) in [(&mut heights[bi], m.rows), (&mut widths[bj], m.cols)] {
                        match *slot {
                            None => *slot = Some(v),
                            Some(h) if h != v => {
                                return Err(SdpError::DimensionMismatch(format!(
                                    "block ({bi},{bj}) does not line up"
                                )))
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
        let heights: Vec<usize> = heights
            .into_iter()
            .map(|h| h.ok_or_else(|| SdpError::DimensionMismatch("empty block row".into())))
            .collect::<Result<_, _>>()?;
        let widths: Vec<usize> = widths
            .into_iter()
            .map(|w| w.ok_or_else(|| SdpError::DimensionMismatch("empty block column".into())))
            .collect::<Result<_, _>>()?;
        let rows = heights.iter().sum();
        let cols = widths.iter().sum();
        let mut out = Self::zeros(rows, cols);
        let mut r0 = 0;
        for (bi, row) in parts.iter().enumerate() {
            let mut c0 = 0;
            for (bj, part) in row.iter().enumerate() {
                if let Some(m) = part {
                    for i in 0..m.rows {
                        for j in 0..m.cols {
                            out.entries[(r0 + i) * cols + c0 + j] = m.get(i, j).clone();
                        }
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        Ok(out)
    }

    /// Block-diagonal assembly.
    pub fn block_diag(parts: &[&AffineMatrix]) -> Self {
        let rows = parts.iter().map(|m| m.rows).sum();
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for m in parts {
            for i in 0..m.rows {
                for j in 0..m.cols {
                    out.entries[(r0 + i) * cols + c0 + j] = m.get(i, j).clone();
                }
            }
            r0 += m.rows;
            c0 += m.cols;
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j).approx_eq(self.get(j, i), tol)))
    }

    pub fn trace(&self) -> Result<LinExpr, SdpError> {
        if self.rows != self.cols {
            return Err(SdpError::DimensionMismatch("trace of a non-square expression".into()));
        }
        let mut acc = LinExpr::default();
        for i in 0..self.rows {
            acc.axpy(1.0, self.get(i, i));
        }
        Ok(acc)
    }

    /// `⟨C, self⟩ = Σ C_ij self_ij`.
    pub fn inner(&self, c: &Matrix) -> Result<LinExpr, SdpError> {
        if c.shape() != (self.rows, self.cols) {
            return Err(SdpError::DimensionMismatch("inner product shapes differ".into()));
        }
        let mut acc = LinExpr::default();
        for i in 0..self.rows {
            for j in 0..self.cols {
                acc.axpy(c[(i, j)], self.get(i, j));
            }
        }
        Ok(acc)
    }

    pub fn eval(&self, x: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }

    pub fn entries(&self) -> &[LinExpr] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linexpr_merge_and_cancel() {
        let a = LinExpr::from_terms(1.0, [(3, 2.0), (1, 1.0), (3, 1.0)]);
        assert_eq!(a.terms(), &[(1, 1.0), (3, 3.0)]);
        let b = a.clone() - a;
        assert!(b.is_zero());
    }

    #[test]
    fn variable_products_are_rejected() {
        let x = AffineMatrix::scaled_identity(&LinExpr::var(0), 2);
        let y = AffineMatrix::scaled_identity(&LinExpr::var(1), 2);
        assert_eq!(x.mul(&y), Err(SdpError::NonAffine));
        let c = AffineMatrix::identity(2).scale(3.0);
        assert!(x.mul(&c).is_ok());
    }

    #[test]
    fn block_assembly_shapes() {
        let a = AffineMatrix::identity(2);
        let b = AffineMatrix::zeros(2, 3);
        let bt = b.transpose();
        let c = AffineMatrix::identity(3);
        let m = AffineMatrix::block(&[vec![Some(&a), Some(&b)], vec![Some(&bt), Some(&c)]]).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (5, 5));
        assert!(m.is_symmetric(0.0));
        let bad = AffineMatrix::block(&[vec![Some(&a), Some(&c)]]);
        assert!(matches!(bad, Err(SdpError::DimensionMismatch(_))));
    }
}
