//! Homogeneous self-dual interior-point method for [`StandardForm`].
//!
//! In conic notation the block constraints read `A x + s = b`, `s ⪰ 0` with
//! `A x = −Σ xᵢ Fᵢ` and `b = F₀`; the embedding tracks `(x, y, S, Z, τ, κ)`
//! with residuals
//!
//! ```text
//! r_x = Aᵀz + Eᵀy + cτ        r_z = A x + S − bτ
//! r_y = E x − hτ              r_τ = cᵀx + bᵀz + hᵀy + κ
//! ```
//!
//! Each iteration scales every block with its Nesterov–Todd point, reduces
//! the Newton system to the Schur complement `M_ij = ⟨Fᵢ, G Fⱼ G⟩`
//! (quasi-definite together with `E`), and takes a Mehrotra
//! predictor–corrector step.

use super::kkt::{KktError, KktSystem};
use super::problem::{StandardBlock, StandardForm};
use super::{ConicBackend, SdpError, SdpSolution, SolveStatus, SolverSettings};
use crate::linalg::Matrix;
use nalgebra::{Cholesky, SymmetricEigen, DVector};

/// Bundled interior-point backend.
#[derive(Debug, Clone, Copy, Default)]
pub struct InteriorPoint;

impl ConicBackend for InteriorPoint {
    fn solve(&self, form: &StandardForm, settings: &SolverSettings) -> Result<SdpSolution, SdpError> {
        settings.validate()?;
        if form.blocks.is_empty() {
            return Err(SdpError::NoBlocks);
        }
        Solver::new(form)?.run(settings)
    }
}

const STEP_FRACTION: f64 = 0.99;
const MAX_REFINE: usize = 10;
/// Factor by which the dual residual may exceed `feas_tol` when a stalled
/// run is accepted from its best iterate.
const STALL_DUAL_SLACK: f64 = 100.0;
/// Iterations without halving the worst residual before the run stops.
const PROGRESS_WINDOW: usize = 40;

struct Scaling {
    r: Matrix,
    rinv: Matrix,
    g: Matrix,
    lambda: DVector<f64>,
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    ds: Vec<Matrix>,
    dz: Vec<Matrix>,
    dtau: f64,
    dkappa: f64,
}

struct Residuals {
    rx: Vec<f64>,
    rz: Vec<Matrix>,
    ry: Vec<f64>,
    rt: f64,
    cx: f64,
    bz: f64,
}

struct Solver<'a> {
    form: &'a StandardForm,
    n: usize,
    m: usize,
    nu: usize,
    kkt: KktSystem,
    /// Per block: KKT positions of `(vars[a], vars[b])`, `a <= b`, packed.
    m_pos: Vec<Vec<usize>>,
    /// Per equality row: KKT positions of `(var, n + k)`.
    eq_pos: Vec<Vec<usize>>,
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<Matrix>,
    z: Vec<Matrix>,
    tau: f64,
    kappa: f64,
}

#[derive(Clone)]
struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<Matrix>,
    z: Vec<Matrix>,
    tau: f64,
    kappa: f64,
}

struct Metrics {
    pres: f64,
    dres: f64,
    gap: f64,
    pobj: f64,
    dobj: f64,
}

impl Metrics {
    fn worst(&self) -> f64 {
        self.pres.max(self.dres).max(self.gap)
    }
}

#[inline]
fn tri(a: usize, b: usize, m: usize) -> usize {
    a * (2 * m - a + 1) / 2 + (b - a)
}

fn sym_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.component_mul(b).sum()
}

/// `Σ_k dx[vars[k]] F_k` for one block.
fn apply_f(block: &StandardBlock, x: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(block.dim, block.dim);
    for (v, entries) in block.vars.iter().zip(&block.coeffs) {
        let xv = x[*v];
        if xv == 0.0 {
            continue;
        }
        for &(i, j, c) in entries {
            m[(i, j)] += c * xv;
            if i != j {
                m[(j, i)] += c * xv;
            }
        }
    }
    m
}

/// `out[vars[k]] += alpha · ⟨F_k, U⟩`.
fn adjoint_f(block: &StandardBlock, u: &Matrix, alpha: f64, out: &mut [f64]) {
    for (v, entries) in block.vars.iter().zip(&block.coeffs) {
        let mut acc = 0.0;
        for &(i, j, c) in entries {
            acc += if i == j { c * u[(i, i)] } else { 2.0 * c * u[(i, j)] };
        }
        out[*v] += alpha * acc;
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest `α` with `I + α M ⪰ 0`.
fn max_step_scaled(m: &Matrix) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let lmin = eig.eigenvalues.min();
    if lmin < 0.0 {
        -1.0 / lmin
    } else {
        f64::INFINITY
    }
}

fn nt_scaling(s: &Matrix, z: &Matrix) -> Option<Scaling> {
    let ls = Cholesky::new(s.clone())?.unpack();
    let lz = Cholesky::new(z.clone())?.unpack();
    let prod = lz.transpose() * &ls;
    let svd = prod.try_svd(true, true, 1e-15, 500)?;
    let u = svd.u?;
    let vt = svd.v_t?;
    let lambda = svd.singular_values;
    if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return None;
    }
    let inv_sqrt = lambda.map(|l| 1.0 / l.sqrt());
    // R = L_s V Λ^{-1/2},  R⁻¹ = Λ^{-1/2} Uᵀ L_zᵀ
    let mut r = &ls * vt.transpose();
    for (j, f) in inv_sqrt.iter().enumerate() {
        r.column_mut(j).scale_mut(*f);
    }
    let mut rinv = u.transpose() * lz.transpose();
    for (i, f) in inv_sqrt.iter().enumerate() {
        rinv.row_mut(i).scale_mut(*f);
    }
    let mut g = rinv.transpose() * &rinv;
    symmetrize(&mut g);
    Some(Scaling { r, rinv, g, lambda })
}

impl<'a> Solver<'a> {
    fn new(form: &'a StandardForm) -> Result<Self, SdpError> {
        let n = form.n_vars;
        let m = form.eq_rows.len();
        if form.c.len() != n || form.eq_rhs.len() != m {
            return Err(SdpError::DimensionMismatch("standard form vectors".into()));
        }
        let mut pattern = Vec::new();
        for b in &form.blocks {
            for (a, &va) in b.vars.iter().enumerate() {
                for &vb in &b.vars[a..] {
                    pattern.push((va, vb));
                }
            }
        }
        for (k, row) in form.eq_rows.iter().enumerate() {
            for &(v, _) in row {
                pattern.push((v, n + k));
            }
        }
        let kkt = KktSystem::new(n, m, &pattern).map_err(|e| SdpError::NumericalBreakdown {
            iteration: 0,
            reason: format!("{e:?}"),
        })?;
        let m_pos = form
            .blocks
            .iter()
            .map(|b| {
                let mut pos = Vec::with_capacity(b.vars.len() * (b.vars.len() + 1) / 2);
                for (a, &va) in b.vars.iter().enumerate() {
                    for &vb in &b.vars[a..] {
                        pos.push(kkt.position(va, vb).expect("pattern entry"));
                    }
                }
                pos
            })
            .collect();
        let eq_pos = form
            .eq_rows
            .iter()
            .enumerate()
            .map(|(k, row)| row.iter().map(|&(v, _)| kkt.position(v, n + k).expect("pattern entry")).collect())
            .collect();
        let nu = form.blocks.iter().map(|b| b.dim).sum();
        Ok(Self {
            form,
            n,
            m,
            nu,
            kkt,
            m_pos,
            eq_pos,
            x: vec![0.0; n],
            y: vec![0.0; m],
            s: form.blocks.iter().map(|b| Matrix::identity(b.dim, b.dim)).collect(),
            z: form.blocks.iter().map(|b| Matrix::identity(b.dim, b.dim)).collect(),
            tau: 1.0,
            kappa: 1.0,
        })
    }

    fn e_mul(&self, x: &[f64]) -> Vec<f64> {
        self.form.eq_rows.iter().map(|row| row.iter().map(|&(v, a)| a * x[v]).sum()).collect()
    }

    fn et_mul_add(&self, y: &[f64], out: &mut [f64]) {
        for (row, yk) in self.form.eq_rows.iter().zip(y) {
            for &(v, a) in row {
                out[v] += a * yk;
            }
        }
    }

    fn residuals(&self) -> Residuals {
        let f = self.form;
        // r_x = −F*(Z) + Eᵀy + cτ
        let mut rx: Vec<f64> = f.c.iter().map(|c| c * self.tau).collect();
        for (b, z) in f.blocks.iter().zip(&self.z) {
            adjoint_f(b, z, -1.0, &mut rx);
        }
        self.et_mul_add(&self.y, &mut rx);
        // r_z = −F(x) + S − τF₀
        let rz = f
            .blocks
            .iter()
            .zip(&self.s)
            .map(|(b, s)| s - apply_f(b, &self.x) - &b.f0 * self.tau)
            .collect();
        let ex = self.e_mul(&self.x);
        let ry = ex.iter().zip(&f.eq_rhs).map(|(e, h)| e - h * self.tau).collect();
        let cx = dot(&f.c, &self.x);
        let bz = f.blocks.iter().zip(&self.z).map(|(b, z)| sym_inner(&b.f0, z)).sum::<f64>()
            + dot(&f.eq_rhs, &self.y);
        Residuals {
            rx,
            rz,
            ry,
            rt: cx + bz + self.kappa,
            cx,
            bz,
        }
    }

    fn assemble(&mut self, scalings: &[Scaling]) -> f64 {
        let n = self.n;
        let vals = self.kkt.values_mut();
        vals.iter_mut().for_each(|v| *v = 0.0);
        for ((b, sc), pos) in self.form.blocks.iter().zip(scalings).zip(&self.m_pos) {
            let g = &sc.g;
            let nv = b.vars.len();
            let mut t = Matrix::zeros(b.dim, b.dim);
            for a in 0..nv {
                // T = G F_a G
                t.fill(0.0);
                for &(i, j, c) in &b.coeffs[a] {
                    let gi = g.column(i);
                    let gj = g.column(j);
                    if i == j {
                        t.ger(c, &gi, &gi, 1.0);
                    } else {
                        t.ger(c, &gi, &gj, 1.0);
                        t.ger(c, &gj, &gi, 1.0);
                    }
                }
                for bb in a..nv {
                    let mut acc = 0.0;
                    for &(i, j, c) in &b.coeffs[bb] {
                        acc += if i == j { c * t[(i, i)] } else { 2.0 * c * t[(i, j)] };
                    }
                    vals[pos[tri(a, bb, nv)]] += acc;
                }
            }
        }
        for (row, pos) in self.form.eq_rows.iter().zip(&self.eq_pos) {
            for (&(_, a), &p) in row.iter().zip(pos) {
                vals[p] += a;
            }
        }
        let mut max_diag: f64 = 0.0;
        for i in 0..n {
            let p = self.kkt.diag_position(i);
            max_diag = max_diag.max(self.kkt.values_mut()[p].abs());
        }
        max_diag
    }

    /// Solves the reduced system for one right-hand side.
    fn kkt_solve(&mut self, rx: &[f64], ry: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rhs = Vec::with_capacity(self.n + self.m);
        rhs.extend_from_slice(rx);
        rhs.extend_from_slice(ry);
        self.kkt.solve(&mut rhs, MAX_REFINE);
        let dy = rhs.split_off(self.n);
        (rhs, dy)
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &mut self,
        scalings: &[Scaling],
        res: &Residuals,
        sol2: &(Vec<f64>, Vec<f64>, Vec<Matrix>),
        eta: f64,
        d_s: &[Matrix],
        d_kappa: f64,
    ) -> Direction {
        let f = self.form;
        // v solves Λ∘v = d_s
        let v_mats: Vec<Matrix> = scalings
            .iter()
            .zip(d_s)
            .map(|(sc, d)| {
                let l = &sc.lambda;
                Matrix::from_fn(d.nrows(), d.ncols(), |i, j| 2.0 * d[(i, j)] / (l[i] + l[j]))
            })
            .collect();
        // base_b = G(η r_z)G + R⁻ᵀ v R⁻¹
        let base: Vec<Matrix> = scalings
            .iter()
            .zip(&res.rz)
            .zip(&v_mats)
            .map(|((sc, rz), v)| {
                let mut m = &sc.g * rz * &sc.g * eta + sc.rinv.transpose() * v * &sc.rinv;
                symmetrize(&mut m);
                m
            })
            .collect();
        let mut rhs_x: Vec<f64> = res.rx.iter().map(|r| -eta * r).collect();
        for (b, m) in f.blocks.iter().zip(&base) {
            adjoint_f(b, m, 1.0, &mut rhs_x);
        }
        let rhs_y: Vec<f64> = res.ry.iter().map(|r| -eta * r).collect();
        let (dx1, dy1) = self.kkt_solve(&rhs_x, &rhs_y);
        let (dx2, dy2, dz2) = sol2;
        let dz1: Vec<Matrix> = f
            .blocks
            .iter()
            .zip(scalings)
            .zip(&base)
            .map(|((b, sc), bm)| {
                let fdx = apply_f(b, &dx1);
                let mut m = bm - &sc.g * fdx * &sc.g;
                symmetrize(&mut m);
                m
            })
            .collect();
        let b_dz = |dz: &[Matrix], dy: &[f64]| -> f64 {
            f.blocks.iter().zip(dz).map(|(b, z)| sym_inner(&b.f0, z)).sum::<f64>()
                + dot(&f.eq_rhs, dy)
        };
        let num = eta * res.rt
            + d_kappa / self.tau
            + dot(&f.c, &dx1)
            + b_dz(&dz1, &dy1);
        let den = self.kappa / self.tau - dot(&f.c, dx2) - b_dz(dz2, dy2);
        let dtau = num / den;
        let dx: Vec<f64> = dx1.iter().zip(dx2).map(|(a, b)| a + dtau * b).collect();
        let dy: Vec<f64> = dy1.iter().zip(dy2).map(|(a, b)| a + dtau * b).collect();
        let dz: Vec<Matrix> = dz1.iter().zip(dz2).map(|(a, b)| a + b * dtau).collect();
        let ds: Vec<Matrix> = f
            .blocks
            .iter()
            .zip(&res.rz)
            .map(|(b, rz)| {
                let mut m = apply_f(b, &dx) + &b.f0 * dtau - rz * eta;
                symmetrize(&mut m);
                m
            })
            .collect();
        let dkappa = (d_kappa - self.kappa * dtau) / self.tau;
        Direction {
            dx,
            dy,
            ds,
            dz,
            dtau,
            dkappa,
        }
    }

    fn max_step(&self, scalings: &[Scaling], d: &Direction) -> (f64, Vec<Matrix>, Vec<Matrix>) {
        let mut alpha = f64::INFINITY;
        if d.dtau < 0.0 {
            alpha = alpha.min(-self.tau / d.dtau);
        }
        if d.dkappa < 0.0 {
            alpha = alpha.min(-self.kappa / d.dkappa);
        }
        let mut ds_t = Vec::with_capacity(scalings.len());
        let mut dz_t = Vec::with_capacity(scalings.len());
        for ((sc, ds), dz) in scalings.iter().zip(&d.ds).zip(&d.dz) {
            let mut st = &sc.rinv * ds * sc.rinv.transpose();
            let mut zt = sc.r.transpose() * dz * &sc.r;
            symmetrize(&mut st);
            symmetrize(&mut zt);
            let is = sc.lambda.map(|l| 1.0 / l.sqrt());
            let scale = |m: &Matrix| Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * is[i] * is[j]);
            alpha = alpha.min(max_step_scaled(&scale(&st)));
            alpha = alpha.min(max_step_scaled(&scale(&zt)));
            ds_t.push(st);
            dz_t.push(zt);
        }
        (alpha, ds_t, dz_t)
    }

    fn snapshot(&self) -> Iterate {
        Iterate {
            x: self.x.clone(),
            y: self.y.clone(),
            s: self.s.clone(),
            z: self.z.clone(),
            tau: self.tau,
            kappa: self.kappa,
        }
    }

    fn restore(&mut self, it: Iterate) {
        self.x = it.x;
        self.y = it.y;
        self.s = it.s;
        self.z = it.z;
        self.tau = it.tau;
        self.kappa = it.kappa;
    }

    fn metrics(&self, res: &Residuals, bnorm: f64, cnorm: f64) -> Metrics {
        let pres = (res.rz.iter().map(|m| m.norm_squared()).sum::<f64>()
            + res.ry.iter().map(|v| v * v).sum::<f64>())
        .sqrt()
            / self.tau
            / (1.0 + bnorm);
        let dres = norm2(&res.rx) / self.tau / (1.0 + cnorm);
        let pobj = res.cx / self.tau;
        let dobj = -res.bz / self.tau;
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        Metrics { pres, dres, gap, pobj, dobj }
    }

    /// Ends a run that cannot reach the requested accuracy: a loose
    /// certificate at the current point, otherwise the best iterate seen,
    /// reported optimal only if primal feasibility and gap hold.
    fn give_up(
        &mut self,
        best: Option<Iterate>,
        iter: usize,
        st: &SolverSettings,
        bnorm: f64,
        cnorm: f64,
    ) -> SdpSolution {
        if self.tau.is_finite() && self.kappa.is_finite() {
            let res = self.residuals();
            if let Some(status) = self.certificate(&res, 1e-5) {
                return self.finish(status, iter, &res);
            }
        }
        if let Some(it) = best {
            self.restore(it);
        }
        let res = self.residuals();
        let mt = self.metrics(&res, bnorm, cnorm);
        let xh: Vec<f64> = self.x.iter().map(|v| v / self.tau).collect();
        let status = if mt.pres <= st.feas_tol
            && mt.gap <= st.gap_tol
            && mt.dres <= STALL_DUAL_SLACK * st.feas_tol
            && self.violation(&xh) <= st.feas_tol
        {
            SolveStatus::Optimal
        } else {
            SolveStatus::MaxIter
        };
        self.finish(status, iter, &res)
    }

    fn violation(&self, xh: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for b in &self.form.blocks {
            let m = b.eval(xh);
            let lmin = SymmetricEigen::new(m.clone()).eigenvalues.min();
            worst = worst.max((-lmin).max(0.0) / (1.0 + m.norm()));
        }
        for (row, h) in self.form.eq_rows.iter().zip(&self.form.eq_rhs) {
            let (mut e, mut size) = (0.0, h.abs());
            for &(v, a) in row {
                e += a * xh[v];
                size += (a * xh[v]).abs();
            }
            worst = worst.max((e - h).abs() / (1.0 + size));
        }
        worst
    }

    fn finish(&self, status: SolveStatus, iterations: usize, res: &Residuals) -> SdpSolution {
        let f = self.form;
        match status {
            SolveStatus::Infeasible => {
                let scale = 1.0 / (-res.bz);
                SdpSolution {
                    status,
                    x: self.x.iter().map(|v| v / self.tau).collect(),
                    objective_value: f64::INFINITY,
                    primal_objective: f64::INFINITY,
                    dual_objective: f64::INFINITY,
                    duality_gap: f64::NAN,
                    max_constraint_violation: f64::INFINITY,
                    iterations,
                    dual_blocks: self.z.iter().map(|z| z * scale).collect(),
                    dual_eq: self.y.iter().map(|y| y * scale).collect(),
                }
            }
            SolveStatus::Unbounded => {
                let scale = 1.0 / (-res.cx);
                SdpSolution {
                    status,
                    x: self.x.iter().map(|v| v * scale).collect(),
                    objective_value: f64::NEG_INFINITY,
                    primal_objective: f64::NEG_INFINITY,
                    dual_objective: f64::NEG_INFINITY,
                    duality_gap: f64::NAN,
                    max_constraint_violation: f64::NAN,
                    iterations,
                    dual_blocks: Vec::new(),
                    dual_eq: Vec::new(),
                }
            }
            _ => {
                let xh: Vec<f64> = self.x.iter().map(|v| v / self.tau).collect();
                let pobj = res.cx / self.tau;
                let dobj = -res.bz / self.tau;
                SdpSolution {
                    status,
                    objective_value: pobj + f.c0,
                    primal_objective: pobj + f.c0,
                    dual_objective: dobj + f.c0,
                    duality_gap: (pobj - dobj) / (1.0 + pobj.abs() + dobj.abs()),
                    max_constraint_violation: self.violation(&xh),
                    x: xh,
                    iterations,
                    dual_blocks: self.z.iter().map(|z| z / self.tau).collect(),
                    dual_eq: self.y.iter().map(|y| y / self.tau).collect(),
                }
            }
        }
    }

    fn certificate(&self, res: &Residuals, tol: f64) -> Option<SolveStatus> {
        if res.bz < 0.0 {
            // Aᵀz + Eᵀy = r_x − cτ
            let a: Vec<f64> = res.rx.iter().zip(&self.form.c).map(|(r, c)| r - c * self.tau).collect();
            if norm2(&a) <= tol * (-res.bz) {
                return Some(SolveStatus::Infeasible);
            }
        }
        if res.cx < 0.0 {
            // A x + s and E x, i.e. r_z + τF₀ and r_y + hτ
            let mut acc = 0.0;
            for (rz, b) in res.rz.iter().zip(&self.form.blocks) {
                acc += (rz + &b.f0 * self.tau).norm_squared();
            }
            for (ry, h) in res.ry.iter().zip(&self.form.eq_rhs) {
                acc += (ry + h * self.tau).powi(2);
            }
            if acc.sqrt() <= tol * (-res.cx) {
                return Some(SolveStatus::Unbounded);
            }
        }
        None
    }

    fn run(mut self, st: &SolverSettings) -> Result<SdpSolution, SdpError> {
        let f = self.form;
        let bnorm = (f.blocks.iter().map(|b| b.f0.norm_squared()).sum::<f64>()
            + f.eq_rhs.iter().map(|h| h * h).sum::<f64>())
        .sqrt();
        let cnorm = norm2(&f.c);
        let mut stalls = 0;
        let mut iter = 0;
        let mut best: Option<(f64, Iterate)> = None;
        let (mut progress_ref, mut last_progress) = (f64::INFINITY, 0);
        loop {
            let res = self.residuals();
            let mt = self.metrics(&res, bnorm, cnorm);
            let mu = (self.s.iter().zip(&self.z).map(|(s, z)| sym_inner(s, z)).sum::<f64>()
                + self.tau * self.kappa)
                / (self.nu as f64 + 1.0);
            if st.verbose {
                eprintln!(
                    "{iter:3} pobj {:+.8e} dobj {:+.8e} pres {:.2e} dres {:.2e} gap {:.2e} tau {:.2e} kappa {:.2e} mu {mu:.2e}",
                    mt.pobj, mt.dobj, mt.pres, mt.dres, mt.gap, self.tau, self.kappa
                );
            }
            if mt.pres <= st.feas_tol && mt.dres <= st.feas_tol && mt.gap <= st.gap_tol {
                let xh: Vec<f64> = self.x.iter().map(|v| v / self.tau).collect();
                if self.violation(&xh) <= st.feas_tol {
                    return Ok(self.finish(SolveStatus::Optimal, iter, &res));
                }
            }
            if let Some(status) = self.certificate(&res, st.infeas_tol) {
                return Ok(self.finish(status, iter, &res));
            }
            let worst = mt.worst();
            if worst.is_finite() && best.as_ref().is_none_or(|(w, _)| worst < *w) {
                best = Some((worst, self.snapshot()));
            }
            if worst < 0.5 * progress_ref {
                progress_ref = worst;
                last_progress = iter;
            }
            if iter >= st.max_iter || stalls >= 5 || iter - last_progress >= PROGRESS_WINDOW {
                return Ok(self.give_up(best.map(|b| b.1), iter, st, bnorm, cnorm));
            }
            iter += 1;

            let Some(scalings) = self
                .s
                .iter()
                .zip(&self.z)
                .map(|(s, z)| nt_scaling(s, z))
                .collect::<Option<Vec<Scaling>>>()
            else {
                if st.verbose {
                    eprintln!("iterate left the cone at iteration {iter}");
                }
                return Ok(self.give_up(best.map(|b| b.1), iter, st, bnorm, cnorm));
            };
            let max_diag = self.assemble(&scalings);
            let delta = 1e-10 + 1e-13 * max_diag;
            match self.kkt.factor(delta) {
                Ok(()) => {}
                Err(KktError::ZeroPivot(_)) => {
                    return Ok(self.give_up(best.map(|b| b.1), iter, st, bnorm, cnorm));
                }
                Err(KktError::Symbolic(reason)) => {
                    return Err(SdpError::NumericalBreakdown { iteration: iter, reason });
                }
            }

            // second right-hand side: [AᵀH⁻¹b − c; h]
            let mut rhs2: Vec<f64> = f.c.iter().map(|c| -c).collect();
            let gf0g: Vec<Matrix> = f
                .blocks
                .iter()
                .zip(&scalings)
                .map(|(b, sc)| &sc.g * &b.f0 * &sc.g)
                .collect();
            for (b, m) in f.blocks.iter().zip(&gf0g) {
                adjoint_f(b, m, -1.0, &mut rhs2);
            }
            let (dx2, dy2) = self.kkt_solve(&rhs2, &f.eq_rhs.clone());
            let dz2: Vec<Matrix> = f
                .blocks
                .iter()
                .zip(&scalings)
                .zip(&gf0g)
                .map(|((b, sc), g0)| {
                    let mut m = -(&sc.g * apply_f(b, &dx2) * &sc.g) - g0;
                    symmetrize(&mut m);
                    m
                })
                .collect();
            let sol2 = (dx2, dy2, dz2);

            // predictor
            let lam_sq: Vec<Matrix> = scalings
                .iter()
                .map(|sc| Matrix::from_diagonal(&sc.lambda.map(|l| -l * l)))
                .collect();
            let aff = self.direction(&scalings, &res, &sol2, 1.0, &lam_sq, -self.tau * self.kappa);
            let (alpha_aff, ds_t, dz_t) = self.max_step(&scalings, &aff);
            let alpha_aff = alpha_aff.min(1.0);
            let sigma = (1.0 - alpha_aff).powi(3);

            // corrector
            let d_s: Vec<Matrix> = lam_sq
                .iter()
                .zip(ds_t.iter().zip(&dz_t))
                .map(|(l2, (a, b))| {
                    let prod = a * b;
                    let mut m = l2 - (&prod + prod.transpose()) * 0.5;
                    for i in 0..m.nrows() {
                        m[(i, i)] += sigma * mu;
                    }
                    m
                })
                .collect();
            let d_kappa = -self.tau * self.kappa - aff.dtau * aff.dkappa + sigma * mu;
            let dir = self.direction(&scalings, &res, &sol2, 1.0 - sigma, &d_s, d_kappa);
            let (alpha_max, _, _) = self.max_step(&scalings, &dir);
            let alpha = (STEP_FRACTION * alpha_max).min(1.0);
            if !alpha.is_finite() {
                return Ok(self.give_up(best.map(|b| b.1), iter, st, bnorm, cnorm));
            }
            if alpha < 1e-10 {
                stalls += 1;
                continue;
            }
            if alpha < 1e-6 {
                stalls += 1;
            } else {
                stalls = 0;
            }

            for (x, d) in self.x.iter_mut().zip(&dir.dx) {
                *x += alpha * d;
            }
            for (y, d) in self.y.iter_mut().zip(&dir.dy) {
                *y += alpha * d;
            }
            for (s, d) in self.s.iter_mut().zip(&dir.ds) {
                *s += d * alpha;
                symmetrize(s);
            }
            for (z, d) in self.z.iter_mut().zip(&dir.dz) {
                *z += d * alpha;
                symmetrize(z);
            }
            self.tau += alpha * dir.dtau;
            self.kappa += alpha * dir.dkappa;

            // keep the embedding from drifting to huge or tiny scales
            let scale = self.tau.max(self.kappa);
            if !(1e-8..=1e8).contains(&scale) {
                let inv = 1.0 / scale;
                self.x.iter_mut().for_each(|v| *v *= inv);
                self.y.iter_mut().for_each(|v| *v *= inv);
                self.s.iter_mut().for_each(|m| *m *= inv);
                self.z.iter_mut().for_each(|m| *m *= inv);
                self.tau *= inv;
                self.kappa *= inv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{AffineMatrix, LinExpr, SdpProblem};
    use super::*;
    use crate::linalg::{max_eig, SymMatrix};
    use crate::lti::RngStream;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    #[test]
    fn two_by_two_eigen_condition() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar_var();
        let m = AffineMatrix::from_fn(2, 2, |i, j| if i == j { x.clone() } else { LinExpr::constant(1.0) });
        p.add_lmi_block(&m).unwrap();
        p.minimize(&x).unwrap();
        let sol = p.solve(&settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-6, "x = {}", sol.x[0]);
        assert!(sol.duality_gap >= -1e-9);
    }

    #[test]
    fn max_eigenvalue_matches_eigensolver() {
        let mut rng = RngStream::new(17, 0);
        for _ in 0..5 {
            let a = rng.normal_matrix(5, 5);
            let m = SymMatrix::symmetrize(&a + a.transpose());
            let mut p = SdpProblem::new();
            let t = p.add_scalar_var();
            let e = AffineMatrix::scaled_identity(&t, 5).sub(&AffineMatrix::constant(&m)).unwrap();
            p.add_lmi_block(&e).unwrap();
            p.minimize(&t).unwrap();
            let sol = p.solve(&settings()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            assert!((sol.x[0] - max_eig(&m).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_indefinite_block_is_infeasible() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar_var();
        p.add_nonnegative(&x).unwrap();
        p.add_lmi_block(&AffineMatrix::constant(&Matrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]))))
            .unwrap();
        p.minimize(&x).unwrap();
        let sol = p.solve(&settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_ray() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar_var();
        p.add_nonnegative(&x).unwrap();
        p.minimize(&(-x)).unwrap();
        let sol = p.solve(&settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn equality_constrained_trace_minimization() {
        // min tr X s.t. X ⪰ 0, X_01 = 1  → X = [[1,1],[1,1]], tr = 2
        let mut p = SdpProblem::new();
        let xv = p.add_matrix_var(2, true);
        let x = xv.expr();
        p.add_lmi_block(&x).unwrap();
        p.add_equality(&(x.get(0, 1).clone() - LinExpr::constant(1.0))).unwrap();
        p.minimize(&x.trace().unwrap()).unwrap();
        let sol = p.solve(&settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective_value - 2.0).abs() < 1e-6);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar_var();
        p.add_nonnegative(&x).unwrap();
        p.add_equality(&(x.clone() - LinExpr::constant(1.0))).unwrap();
        p.add_equality(&(x.clone() - LinExpr::constant(2.0))).unwrap();
        p.minimize(&x).unwrap();
        assert_eq!(p.solve(&settings()).unwrap().status, SolveStatus::Infeasible);
    }
}
