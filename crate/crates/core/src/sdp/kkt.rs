//! Quasi-definite reduced KKT system
//!
//! ```text
//! [ M   Eᵀ ] [dx]   [r_x]
//! [ E   0  ] [dy] = [r_y]
//! ```
//!
//! stored as the upper triangle in CSC form with a fixed sparsity pattern.
//! The symbolic factorization (AMD ordering) is computed once; each
//! iteration refactors numerically with a small static regularization
//! `diag(+δ, −δ)` and recovers the unregularized solution by iterative
//! refinement.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::{LdltParams, LdltRegularization};
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LdltRef, SymbolicCholesky,
    SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side, Spec};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum KktError {
    Symbolic(String),
    ZeroPivot(usize),
}

pub(crate) struct KktSystem {
    n: usize,
    m: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
    diag_pos: Vec<usize>,
    reg_values: Vec<f64>,
    symbolic: SymbolicCholesky<usize>,
    l_values: Vec<f64>,
    signs: Vec<i8>,
    mem: MemBuffer,
    delta: f64,
}

impl KktSystem {
    /// `pattern` holds upper-triangle coordinates `(i, j)` with `i <= j`
    /// over the full `n + m` system; diagonals are always included.
    pub(crate) fn new(n: usize, m: usize, pattern: &[(usize, usize)]) -> Result<Self, KktError> {
        let dim = n + m;
        let mut cols: Vec<Vec<usize>> = (0..dim).map(|j| vec![j]).collect();
        for &(i, j) in pattern {
            debug_assert!(i <= j && j < dim);
            cols[j].push(i);
        }
        let mut col_ptr = Vec::with_capacity(dim + 1);
        let mut row_idx = Vec::new();
        let mut diag_pos = Vec::with_capacity(dim);
        col_ptr.push(0);
        for (j, col) in cols.iter_mut().enumerate() {
            col.sort_unstable();
            col.dedup();
            for &i in col.iter() {
                if i == j {
                    diag_pos.push(row_idx.len());
                }
                row_idx.push(i);
            }
            col_ptr.push(row_idx.len());
        }
        let symbolic = {
            let pattern = SymbolicSparseColMatRef::new_checked(dim, dim, &col_ptr, None, &row_idx);
            factorize_symbolic_cholesky(
                pattern,
                Side::Upper,
                SymmetricOrdering::Amd,
                CholeskySymbolicParams::default(),
            )
            .map_err(|e| KktError::Symbolic(format!("{e:?}")))?
        };
        let signs = (0..dim).map(|i| if i < n { 1 } else { -1 }).collect();
        let req = symbolic
            .factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Spec::<LdltParams, f64>::default())
            .or(symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
        let nnz = row_idx.len();
        Ok(Self {
            n,
            m,
            l_values: vec![0.0; symbolic.len_val()],
            symbolic,
            col_ptr,
            row_idx,
            values: vec![0.0; nnz],
            reg_values: vec![0.0; nnz],
            diag_pos,
            signs,
            mem: MemBuffer::new(req),
            delta: 0.0,
        })
    }

    pub(crate) fn dim(&self) -> usize {
        self.n + self.m
    }

    /// Storage index of upper-triangle entry `(i, j)`, `i <= j`.
    pub(crate) fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let col = &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]];
        col.binary_search(&i).ok().map(|k| self.col_ptr[j] + k)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn diag_position(&self, i: usize) -> usize {
        self.diag_pos[i]
    }

    /// Numeric factorization of `K + diag(δ I_n, −δ I_m)`.
    pub(crate) fn factor(&mut self, delta: f64) -> Result<(), KktError> {
        self.delta = delta;
        self.reg_values.copy_from_slice(&self.values);
        for i in 0..self.dim() {
            let p = self.diag_pos[i];
            self.reg_values[p] += if i < self.n { delta } else { -delta };
        }
        let dim = self.dim();
        let mat = SparseColMatRef::new(
            SymbolicSparseColMatRef::new_checked(dim, dim, &self.col_ptr, None, &self.row_idx),
            &self.reg_values,
        );
        let reg = LdltRegularization {
            dynamic_regularization_signs: Some(&self.signs),
            dynamic_regularization_delta: delta.max(1e-12),
            dynamic_regularization_epsilon: 1e-14,
        };
        self.symbolic
            .factorize_numeric_ldlt(
                &mut self.l_values,
                mat,
                Side::Upper,
                reg,
                Par::Seq,
                MemStack::new(&mut self.mem),
                Spec::<LdltParams, f64>::default(),
            )
            .map(|_| ())
            .map_err(|e| match e {
                faer::linalg::cholesky::ldlt::factor::LdltError::ZeroPivot { index } => {
                    KktError::ZeroPivot(index)
                }
            })
    }

    fn raw_solve(&mut self, rhs: &mut [f64]) {
        let ldlt = LdltRef::new(&self.symbolic, &self.l_values);
        let n = rhs.len();
        let mat = MatMut::from_column_major_slice_mut(rhs, n, 1);
        ldlt.solve_in_place_with_conj(Conj::No, mat, Par::Seq, MemStack::new(&mut self.mem));
    }

    /// `y = K x` with the unregularized values.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.dim() {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[p];
                let v = self.values[p];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
    }

    /// Solves `K x = rhs` in place; returns the final relative residual.
    pub(crate) fn solve(&mut self, rhs: &mut [f64], max_refine: usize) -> f64 {
        let b = rhs.to_vec();
        let bnorm = b.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        self.raw_solve(rhs);
        let mut r = vec![0.0; b.len()];
        let mut last = f64::INFINITY;
        for _ in 0..=max_refine {
            self.apply(rhs, &mut r);
            for (ri, bi) in r.iter_mut().zip(&b) {
                *ri = bi - *ri;
            }
            let res = r.iter().fold(0.0f64, |a, v| a.max(v.abs())) / bnorm;
            if res < 1e-14 || res > 0.5 * last {
                last = last.min(res);
                break;
            }
            last = res;
            self.raw_solve(&mut r);
            for (xi, di) in rhs.iter_mut().zip(&r) {
                *xi += di;
            }
        }
        last
    }
}
