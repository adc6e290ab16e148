//! SDP assembly for the nominal, robust and dual designs.
//!
//! Every program shares the variables `Y_t` (sym, n_x+n_u), `P_t` (sym),
//! `Z_t = P_t K_tᵀ` and `S_t` for `t = 1 … T-1` plus `P_T`, the objective
//! `Σ tr Y_t + tr(Q P_T)`, and the cost LMI
//!
//! ```text
//! [ Y_t − blkdiag(0, R½ S_t R½)   [Q½ P_t; R½ Z_tᵀ] ]
//! [            *                        P_t         ] ⪰ 0.
//! ```
//!
//! They differ in how the closed-loop Lyapunov inequality
//! `P_{t+1} ⪰ (A + B K_t) P_t (A + B K_t)ᵀ + σ_w² I + B S_t Bᵀ` is imposed.

use super::{SynthesisError, SynthesisSpec};
use crate::linalg::Matrix;
use crate::sdp::{AffineMatrix, LinExpr, MatrixVar, SdpProblem};
use crate::sysid::{chi2_dof, chi2_quantile};

/// How the uncertainty multiplier enters the robust LMI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Multiplier {
    /// One decision variable `p_t ≥ 0` per step.
    Variable,
    /// The same constant `p` at every step.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProgramKind {
    Nominal,
    Robust(Multiplier),
    /// Fixed multiplier; the information lower bound enters the LMI.
    Dual(f64),
}

/// Variable handles of an assembled program.
#[derive(Debug, Clone)]
pub struct ProgramVars {
    pub y: Vec<MatrixVar>,
    /// `P_1 … P_T`.
    pub p: Vec<MatrixVar>,
    pub z: Vec<MatrixVar>,
    pub s: Vec<MatrixVar>,
    /// Multiplier expression per step (empty for the nominal program).
    pub multipliers: Vec<LinExpr>,
    /// Running information bound `D̂_t` (dual program only).
    pub info: Vec<MatrixVar>,
}

#[derive(Debug, Clone)]
pub struct BuiltProgram {
    pub kind: ProgramKind,
    pub problem: SdpProblem,
    pub vars: ProgramVars,
}

struct Common {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    a_hat: Matrix,
    b_hat: Matrix,
    q_sqrt: Matrix,
    r_sqrt: Matrix,
}

fn common(spec: &SynthesisSpec) -> Result<Common, SynthesisError> {
    spec.validate()?;
    Ok(Common {
        n_x: spec.model.n_x(),
        n_u: spec.model.n_u(),
        horizon: spec.horizon,
        a_hat: spec.model.a_hat.clone(),
        b_hat: spec.model.b_hat.clone(),
        q_sqrt: spec.cm.q_sqrt().as_matrix().clone(),
        r_sqrt: spec.cm.r_sqrt().as_matrix().clone(),
    })
}

/// Variables, objective, cost LMIs and the sign constraints shared by all
/// programs.
fn skeleton(spec: &SynthesisSpec, c: &Common) -> Result<(SdpProblem, ProgramVars), SynthesisError> {
    let (n_x, n_u) = (c.n_x, c.n_u);
    let steps = c.horizon - 1;
    let mut prob = SdpProblem::new();
    let mut vars = ProgramVars {
        y: Vec::with_capacity(steps),
        p: Vec::with_capacity(c.horizon),
        z: Vec::with_capacity(steps),
        s: Vec::with_capacity(steps),
        multipliers: Vec::new(),
        info: Vec::new(),
    };
    // variables are laid out step by step so each step's group is contiguous
    for _ in 0..steps {
        vars.p.push(prob.add_matrix_var(n_x, true));
        vars.z.push(prob.add_rect_var(n_x, n_u, false));
        vars.s.push(prob.add_matrix_var(n_u, true));
        vars.y.push(prob.add_matrix_var(n_x + n_u, true));
    }
    vars.p.push(prob.add_matrix_var(n_x, true));

    let mut objective = LinExpr::default();
    for t in 0..steps {
        let y = vars.y[t].expr();
        let p = vars.p[t].expr();
        let z = vars.z[t].expr();
        let s = vars.s[t].expr();
        objective.axpy(1.0, &y.trace()?);

        let rsr = s.left_mul(&c.r_sqrt)?.right_mul(&c.r_sqrt)?;
        let top_left = y.sub(&AffineMatrix::block_diag(&[&AffineMatrix::zeros(n_x, n_x), &rsr]))?;
        let qp = p.left_mul(&c.q_sqrt)?;
        let rz = z.transpose().left_mul(&c.r_sqrt)?;
        let top_right = AffineMatrix::block(&[vec![Some(&qp)], vec![Some(&rz)]])?;
        let trt = top_right.transpose();
        let cost = AffineMatrix::block(&[
            vec![Some(&top_left), Some(&top_right)],
            vec![Some(&trt), Some(&p)],
        ])?;
        prob.add_lmi_block(&cost)?;
        prob.add_lmi_block(&y)?;
        prob.add_lmi_block(&s)?;
        prob.add_lmi_block(&vars.p[t + 1].expr())?;
    }
    let p_t = vars.p[steps].expr();
    objective.axpy(1.0, &p_t.inner(spec.cm.q().as_matrix())?);
    let p1 = vars.p[0]
        .expr()
        .sub(&AffineMatrix::identity(n_x).scale(spec.sigma_w2))?;
    prob.add_lmi_block(&p1)?;
    prob.minimize(&objective)?;
    Ok((prob, vars))
}

/// `P_{t+1} − σ_w² I`, the common centre block.
fn next_minus_noise(vars: &ProgramVars, t: usize, n_x: usize, sigma_w2: f64) -> Result<AffineMatrix, SynthesisError> {
    Ok(vars.p[t + 1].expr().sub(&AffineMatrix::identity(n_x).scale(sigma_w2))?)
}

pub fn build_nominal(spec: &SynthesisSpec) -> Result<BuiltProgram, SynthesisError> {
    let c = common(spec)?;
    let (mut prob, vars) = skeleton(spec, &c)?;
    let a_t = c.a_hat.transpose();
    let b_t = c.b_hat.transpose();
    for t in 0..c.horizon - 1 {
        let p = vars.p[t].expr();
        let z = vars.z[t].expr();
        let s = vars.s[t].expr();
        // F_t = P_t Âᵀ + Z_t B̂ᵀ
        let f = p.right_mul(&a_t)?.add(&z.right_mul(&b_t)?)?;
        let bsb = s.left_mul(&c.b_hat)?.right_mul(&b_t)?;
        let lower = next_minus_noise(&vars, t, c.n_x, spec.sigma_w2)?.sub(&bsb)?;
        let ft = f.transpose();
        let lmi = AffineMatrix::block(&[vec![Some(&p), Some(&f)], vec![Some(&ft), Some(&lower)]])?;
        prob.add_lmi_block(&lmi)?;
    }
    Ok(BuiltProgram {
        kind: ProgramKind::Nominal,
        problem: prob,
        vars,
    })
}

/// Robust LMI
///
/// ```text
/// [ blkdiag(P_t, S_t)   H_t                       G_t          ]
/// [       *             P_{t+1} − σ_w² I − p_t I  0            ]
/// [       *             *                         p_t D ] ⪰ 0
/// ```
///
/// with `G_t = −[[P_t, Z_t], [0, S_t]]`, `H_t = −G_t [Âᵀ; B̂ᵀ]` and `D = D₀`
/// (robust) or `D₀ + D̂_t` (dual).
fn robust_lmis(
    spec: &SynthesisSpec,
    c: &Common,
    prob: &mut SdpProblem,
    vars: &mut ProgramVars,
    mult: Multiplier,
    with_info: bool,
) -> Result<(), SynthesisError> {
    let (n_x, n_u) = (c.n_x, c.n_u);
    let nz = n_x + n_u;
    let steps = c.horizon - 1;
    let mut ab_t = Matrix::zeros(nz, n_x);
    ab_t.rows_mut(0, n_x).copy_from(&c.a_hat.transpose());
    ab_t.rows_mut(n_x, n_u).copy_from(&c.b_hat.transpose());
    let d0 = spec.model.d.as_matrix();
    let k_bar = if with_info {
        Some(spec.k_bar.as_ref().ok_or(SynthesisError::MissingComparisonGains)?)
    } else {
        None
    };
    let info_scale = if with_info {
        let c_chi = chi2_quantile(chi2_dof(n_x, n_u), spec.model.delta)?;
        1.0 / (c_chi * spec.sigma_w2)
    } else {
        0.0
    };

    for t in 0..steps {
        let p = vars.p[t].expr();
        let z = vars.z[t].expr();
        let s = vars.s[t].expr();
        let m = AffineMatrix::block(&[
            vec![Some(&p), Some(&z)],
            vec![Some(&AffineMatrix::zeros(n_u, n_x)), Some(&s)],
        ])?;
        let h = m.right_mul(&ab_t)?;
        let g = m.scale(-1.0);
        let top = AffineMatrix::block_diag(&[&p, &s]);

        let (mult_expr, p_const) = match mult {
            Multiplier::Variable => {
                let v = prob.add_scalar_var();
                prob.add_nonnegative(&v)?;
                (v, None)
            }
            Multiplier::Fixed(pv) => (LinExpr::constant(pv), Some(pv)),
        };
        let centre = next_minus_noise(vars, t, n_x, spec.sigma_w2)?
            .sub(&AffineMatrix::scaled_identity(&mult_expr, n_x))?;
        let mut bottom = AffineMatrix::from_fn(nz, nz, |i, j| mult_expr.scale(d0[(i, j)]));

        if let Some(k_bar) = k_bar {
            let pv = p_const.expect("dual program uses a fixed multiplier");
            // D̂_t = D̂_{t-1} + (1/(c_χ σ_w²)) [[P, Z], [Zᵀ, Zᵀ K̄ᵀ + K̄ Z − K̄ P K̄ᵀ + S]]
            let kb = &k_bar[t];
            let zt = z.transpose();
            let kz = z.transpose().right_mul(&kb.transpose())?;
            let lower = kz
                .add(&kz.transpose())?
                .sub(&p.left_mul(kb)?.right_mul(&kb.transpose())?)?
                .add(&s)?;
            let incr = AffineMatrix::block(&[vec![Some(&p), Some(&z)], vec![Some(&zt), Some(&lower)]])?
                .scale(info_scale);
            let info = prob.add_matrix_var(nz, true);
            let mut rhs = incr;
            if t > 0 {
                rhs = rhs.add(&vars.info[t - 1].expr())?;
            }
            prob.add_matrix_equality(&info.expr().sub(&rhs)?)?;
            bottom = bottom.add(&info.expr().scale(pv))?;
            vars.info.push(info);
        }

        let ht = h.transpose();
        let gt = g.transpose();
        let lmi = AffineMatrix::block(&[
            vec![Some(&top), Some(&h), Some(&g)],
            vec![Some(&ht), Some(&centre), None],
            vec![Some(&gt), None, Some(&bottom)],
        ])?;
        prob.add_lmi_block(&lmi)?;
        vars.multipliers.push(mult_expr);
    }
    Ok(())
}

pub fn build_robust(spec: &SynthesisSpec) -> Result<BuiltProgram, SynthesisError> {
    build_robust_with(spec, Multiplier::Variable)
}

/// Robust program with the multiplier pinned to `p` at every step.
pub fn build_robust_fixed(spec: &SynthesisSpec, p: f64) -> Result<BuiltProgram, SynthesisError> {
    check_multiplier(p)?;
    build_robust_with(spec, Multiplier::Fixed(p))
}

fn build_robust_with(spec: &SynthesisSpec, mult: Multiplier) -> Result<BuiltProgram, SynthesisError> {
    let c = common(spec)?;
    let (mut prob, mut vars) = skeleton(spec, &c)?;
    robust_lmis(spec, &c, &mut prob, &mut vars, mult, false)?;
    Ok(BuiltProgram {
        kind: ProgramKind::Robust(mult),
        problem: prob,
        vars,
    })
}

pub fn build_dual(spec: &SynthesisSpec, p: f64) -> Result<BuiltProgram, SynthesisError> {
    check_multiplier(p)?;
    let c = common(spec)?;
    let k_bar = spec.k_bar.as_ref().ok_or(SynthesisError::MissingComparisonGains)?;
    if k_bar.len() != c.horizon - 1 || k_bar.iter().any(|k| k.shape() != (c.n_u, c.n_x)) {
        return Err(SynthesisError::DimensionMismatch(format!(
            "comparison gains must be {} matrices of shape {}x{}",
            c.horizon - 1,
            c.n_u,
            c.n_x
        )));
    }
    let (mut prob, mut vars) = skeleton(spec, &c)?;
    robust_lmis(spec, &c, &mut prob, &mut vars, Multiplier::Fixed(p), true)?;
    Ok(BuiltProgram {
        kind: ProgramKind::Dual(p),
        problem: prob,
        vars,
    })
}

fn check_multiplier(p: f64) -> Result<(), SynthesisError> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(SynthesisError::InvalidArgument(format!("multiplier must be positive, got {p}")));
    }
    Ok(())
}
