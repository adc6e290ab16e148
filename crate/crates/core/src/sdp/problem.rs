use super::expr::{AffineMatrix, LinExpr};
use super::solver::InteriorPoint;
use super::{ConicBackend, SdpError, SdpSolution, SolverSettings};
use crate::linalg::Matrix;
use std::collections::BTreeMap;
use std::io::{self, Write};

/// A group of scalar decision variables viewed as a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixVar {
    offset: usize,
    rows: usize,
    cols: usize,
    symmetric: bool,
}

impl MatrixVar {
    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    /// Number of scalar variables in the group.
    pub fn len(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global indices `offset .. offset + len()`.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Scalar index of entry `(i, j)`; symmetric groups store the upper
    /// triangle row by row.
    pub fn index(&self, i: usize, j: usize) -> usize {
        if self.symmetric {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            // row a of the packed triangle starts at a·n − a(a−1)/2
            self.offset + a * (2 * self.rows - a + 1) / 2 + (b - a)
        } else {
            self.offset + i * self.cols + j
        }
    }

    pub fn expr(&self) -> AffineMatrix {
        AffineMatrix::from_fn(self.rows, self.cols, |i, j| LinExpr::var(self.index(i, j)))
    }

    /// Value of the group at the point `x`.
    pub fn value(&self, x: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| x[self.index(i, j)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHandle(pub usize);

/// One LMI `F₀ + Σ xᵢ Fᵢ ⪰ 0`. `coeffs[k]` holds the upper-triangle entries
/// `(row, col, value)` of `F_{vars[k]}`; `vars` is sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardBlock {
    pub dim: usize,
    pub f0: Matrix,
    pub vars: Vec<usize>,
    pub coeffs: Vec<Vec<(usize, usize, f64)>>,
}

impl StandardBlock {
    fn from_expr(expr: &AffineMatrix) -> Self {
        let dim = expr.nrows();
        let mut f0 = Matrix::zeros(dim, dim);
        let mut map: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
        for i in 0..dim {
            for j in i..dim {
                let e = expr.get(i, j);
                f0[(i, j)] = e.constant;
                f0[(j, i)] = e.constant;
                for &(v, c) in e.terms() {
                    map.entry(v).or_default().push((i, j, c));
                }
            }
        }
        let (vars, coeffs) = map.into_iter().unzip();
        Self {
            dim,
            f0,
            vars,
            coeffs,
        }
    }

    /// `F₀ + Σ xᵢ Fᵢ`.
    pub fn eval(&self, x: &[f64]) -> Matrix {
        let mut m = self.f0.clone();
        for (v, entries) in self.vars.iter().zip(&self.coeffs) {
            let xv = x[*v];
            for &(i, j, c) in entries {
                m[(i, j)] += c * xv;
                if i != j {
                    m[(j, i)] += c * xv;
                }
            }
        }
        m
    }
}

/// Solver input: `min cᵀx + c0` s.t. every block PSD and `E x = h`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StandardForm {
    pub n_vars: usize,
    pub c: Vec<f64>,
    pub c0: f64,
    pub blocks: Vec<StandardBlock>,
    /// Sparse rows of `E`.
    pub eq_rows: Vec<Vec<(usize, f64)>>,
    pub eq_rhs: Vec<f64>,
}

impl StandardForm {
    /// Writes the problem in SDPA sparse format. The constant term flips sign
    /// (SDPA uses `Σ xᵢ Fᵢ − F₀ ⪰ 0`), and equalities become a trailing
    /// diagonal block holding both inequalities `E x − h ≥ 0` and `h − E x ≥ 0`.
    pub fn write_sdpa<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n_eq = self.eq_rows.len();
        let n_blocks = self.blocks.len() + usize::from(n_eq > 0);
        writeln!(w, "* objective constant {:e}", self.c0)?;
        writeln!(w, "{}", self.n_vars)?;
        writeln!(w, "{n_blocks}")?;
        let mut sizes: Vec<String> = self.blocks.iter().map(|b| b.dim.to_string()).collect();
        if n_eq > 0 {
            sizes.push(format!("-{}", 2 * n_eq));
        }
        writeln!(w, "{}", sizes.join(" "))?;
        let c: Vec<String> = self.c.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", c.join(" "))?;
        for (bi, b) in self.blocks.iter().enumerate() {
            for i in 0..b.dim {
                for j in i..b.dim {
                    let v = b.f0[(i, j)];
                    if v != 0.0 {
                        writeln!(w, "0 {} {} {} {:e}", bi + 1, i + 1, j + 1, -v)?;
                    }
                }
            }
            for (var, entries) in b.vars.iter().zip(&b.coeffs) {
                for &(i, j, v) in entries {
                    writeln!(w, "{} {} {} {} {:e}", var + 1, bi + 1, i + 1, j + 1, v)?;
                }
            }
        }
        if n_eq > 0 {
            let blk = self.blocks.len() + 1;
            for (k, (row, h)) in self.eq_rows.iter().zip(&self.eq_rhs).enumerate() {
                let (p, m) = (2 * k + 1, 2 * k + 2);
                if *h != 0.0 {
                    writeln!(w, "0 {blk} {p} {p} {h:e}")?;
                    writeln!(w, "0 {blk} {m} {m} {:e}", -h)?;
                }
                for &(var, a) in row {
                    writeln!(w, "{} {blk} {p} {p} {a:e}", var + 1)?;
                    writeln!(w, "{} {blk} {m} {m} {:e}", var + 1, -a)?;
                }
            }
        }
        Ok(())
    }
}

/// Incremental builder for block SDPs.
#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    n_vars: usize,
    objective: LinExpr,
    blocks: Vec<StandardBlock>,
    eq_rows: Vec<Vec<(usize, f64)>>,
    eq_rhs: Vec<f64>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_equalities(&self) -> usize {
        self.eq_rows.len()
    }

    /// Registers `dim(dim+1)/2` scalars (symmetric) or `dim²` scalars.
    pub fn add_matrix_var(&mut self, dim: usize, symmetric: bool) -> MatrixVar {
        self.add_rect_var(dim, dim, symmetric)
    }

    /// General `rows × cols` group (or symmetric when `symmetric` and square).
    pub fn add_rect_var(&mut self, rows: usize, cols: usize, symmetric: bool) -> MatrixVar {
        assert!(rows >= 1 && cols >= 1, "matrix variable needs positive dimensions");
        assert!(!symmetric || rows == cols, "symmetric variables must be square");
        let v = MatrixVar {
            offset: self.n_vars,
            rows,
            cols,
            symmetric,
        };
        self.n_vars += v.len();
        v
    }

    pub fn add_scalar_var(&mut self) -> LinExpr {
        let i = self.n_vars;
        self.n_vars += 1;
        LinExpr::var(i)
    }

    fn check_vars(&self, e: &LinExpr) -> Result<(), SdpError> {
        match e.terms().last() {
            Some(&(i, _)) if i >= self.n_vars => Err(SdpError::DimensionMismatch(format!(
                "variable {i} is not registered ({} variables)",
                self.n_vars
            ))),
            _ => Ok(()),
        }
    }

    /// Requires `expr(x) ⪰ 0`.
    pub fn add_lmi_block(&mut self, expr: &AffineMatrix) -> Result<BlockHandle, SdpError> {
        if expr.nrows() != expr.ncols() || expr.nrows() == 0 {
            return Err(SdpError::DimensionMismatch(format!(
                "LMI block must be square and non-empty, got {}x{}",
                expr.nrows(),
                expr.ncols()
            )));
        }
        let scale = expr
            .entries()
            .iter()
            .flat_map(|e| std::iter::once(e.constant).chain(e.terms().iter().map(|t| t.1)))
            .fold(1.0f64, |a, v| a.max(v.abs()));
        if !expr.is_symmetric(1e-10 * scale) {
            return Err(SdpError::NotSymmetric);
        }
        for e in expr.entries() {
            self.check_vars(e)?;
        }
        self.blocks.push(StandardBlock::from_expr(expr));
        Ok(BlockHandle(self.blocks.len() - 1))
    }

    /// Requires `expr(x) ≥ 0`.
    pub fn add_nonnegative(&mut self, expr: &LinExpr) -> Result<BlockHandle, SdpError> {
        let mut m = AffineMatrix::zeros(1, 1);
        m.set(0, 0, expr.clone());
        self.add_lmi_block(&m)
    }

    /// Requires `expr(x) = 0`.
    pub fn add_equality(&mut self, expr: &LinExpr) -> Result<(), SdpError> {
        self.check_vars(expr)?;
        if expr.is_constant() {
            if expr.constant != 0.0 {
                // 0 = c with c ≠ 0: keep it so the solver reports infeasibility
                self.eq_rows.push(Vec::new());
                self.eq_rhs.push(-expr.constant);
            }
            return Ok(());
        }
        self.eq_rows.push(expr.terms().to_vec());
        self.eq_rhs.push(-expr.constant);
        Ok(())
    }

    /// Requires `expr(x) = 0` entrywise on the upper triangle of a symmetric
    /// expression, or on every entry otherwise.
    pub fn add_matrix_equality(&mut self, expr: &AffineMatrix) -> Result<(), SdpError> {
        let sym = expr.nrows() == expr.ncols() && expr.is_symmetric(0.0);
        for i in 0..expr.nrows() {
            let start = if sym { i } else { 0 };
            for j in start..expr.ncols() {
                self.add_equality(expr.get(i, j))?;
            }
        }
        Ok(())
    }

    pub fn minimize(&mut self, objective: &LinExpr) -> Result<(), SdpError> {
        self.check_vars(objective)?;
        self.objective = objective.clone();
        Ok(())
    }

    pub fn block(&self, h: BlockHandle) -> &StandardBlock {
        &self.blocks[h.0]
    }

    pub fn to_standard_form(&self) -> Result<StandardForm, SdpError> {
        if self.blocks.is_empty() {
            return Err(SdpError::NoBlocks);
        }
        let mut c = vec![0.0; self.n_vars];
        for &(i, v) in self.objective.terms() {
            c[i] += v;
        }
        Ok(StandardForm {
            n_vars: self.n_vars,
            c,
            c0: self.objective.constant,
            blocks: self.blocks.clone(),
            eq_rows: self.eq_rows.clone(),
            eq_rhs: self.eq_rhs.clone(),
        })
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<SdpSolution, SdpError> {
        self.solve_with(&InteriorPoint, settings)
    }

    pub fn solve_with<B: ConicBackend>(
        &self,
        backend: &B,
        settings: &SolverSettings,
    ) -> Result<SdpSolution, SdpError> {
        settings.validate()?;
        backend.solve(&self.to_standard_form()?, settings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variable_counts_and_ranges() {
        let mut p = SdpProblem::new();
        let s = p.add_matrix_var(3, true);
        let g = p.add_rect_var(3, 2, false);
        assert_eq!(s.len(), 6);
        assert_eq!(g.len(), 6);
        assert_eq!(s.range(), 0..6);
        assert_eq!(g.range(), 6..12);
        assert_eq!(p.n_vars(), 12);
    }

    #[test]
    fn symmetric_packing_is_a_bijection() {
        let mut p = SdpProblem::new();
        let _ = p.add_scalar_var();
        let s = p.add_matrix_var(4, true);
        let mut seen = Vec::new();
        for i in 0..4 {
            for j in i..4 {
                assert_eq!(s.index(i, j), s.index(j, i));
                seen.push(s.index(i, j));
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, s.range().collect::<Vec<_>>());
    }

    #[test]
    fn rejects_asymmetric_block() {
        let mut p = SdpProblem::new();
        let g = p.add_rect_var(2, 2, false);
        assert_eq!(p.add_lmi_block(&g.expr()), Err(SdpError::NotSymmetric));
    }

    #[test]
    fn sdpa_dump_lists_all_entries() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar_var();
        let m = AffineMatrix::from_fn(2, 2, |i, j| if i == j { x.clone() } else { LinExpr::constant(1.0) });
        p.add_lmi_block(&m).unwrap();
        p.add_equality(&(x.clone() - LinExpr::constant(2.0))).unwrap();
        p.minimize(&x).unwrap();
        let mut out = Vec::new();
        p.to_standard_form().unwrap().write_sdpa(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "1");
        assert_eq!(lines[2], "2");
        assert_eq!(lines[3], "2 -2");
        assert!(lines.contains(&"0 1 1 2 -1e0"));
        assert!(lines.contains(&"1 1 1 1 1e0"));
        assert!(lines.contains(&"0 2 1 1 2e0"));
    }
}
