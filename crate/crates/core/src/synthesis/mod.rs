//! Policy synthesis through semidefinite programs: nominal, robust to a
//! fixed ellipsoidal uncertainty set, and dual (robust with an
//! exploration-dependent information bound), plus policy recovery and
//! robustness checks.

mod programs;

pub use programs::{
    build_dual, build_nominal, build_robust, build_robust_fixed, BuiltProgram, Multiplier,
    ProgramKind, ProgramVars,
};

use crate::evaluation::{CostMatrices, EvalError, Policy};
use crate::linalg::{cholesky, min_eig, project_psd, LinalgError, Matrix, SymMatrix};
use crate::lti::RngStream;
use crate::sdp::{SdpError, SolveStatus, SolverSettings};
use crate::sysid::{boundary_sample, chi2_dof, chi2_quantile, SysidError, UncertaintyModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `P_t` with a smallest eigenvalue at or below this is treated as singular.
pub const SINGULAR_COVARIANCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthesisError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dual program needs comparison gains")]
    MissingComparisonGains,
    #[error("{program} program not solved: {status:?}")]
    NotSolved { program: String, status: SolveStatus },
    #[error("no multiplier on the grid gives a feasible program")]
    AllInfeasible { table: Vec<LineSearchPoint> },
    #[error("covariance P_{t} is singular (min eigenvalue {min_eig:e})")]
    SingularCovariance { t: usize, min_eig: f64 },
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Sysid(#[from] SysidError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Inputs shared by all programs.
#[derive(Debug, Clone)]
pub struct SynthesisSpec {
    /// Nominal model and uncertainty; `D` is ignored by the nominal program.
    pub model: UncertaintyModel,
    pub cm: CostMatrices,
    pub sigma_w2: f64,
    pub horizon: usize,
    /// Comparison gains `K̄_1 … K̄_{T-1}` for the information bound.
    pub k_bar: Option<Vec<Matrix>>,
    /// Multipliers tried by the line search.
    pub p_grid: Vec<f64>,
    /// Golden-section steps after the grid search.
    pub refine_steps: usize,
    pub settings: SolverSettings,
}

/// `n` log-spaced points between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl SynthesisSpec {
    pub fn new(model: UncertaintyModel, cm: CostMatrices, sigma_w2: f64, horizon: usize) -> Self {
        Self {
            model,
            cm,
            sigma_w2,
            horizon,
            k_bar: None,
            p_grid: log_grid(1e-3, 1e3, 13),
            refine_steps: 6,
            settings: SolverSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.horizon < 2 {
            return Err(SynthesisError::InvalidArgument("horizon must be >= 2".into()));
        }
        if !(self.sigma_w2 > 0.0) {
            return Err(SynthesisError::InvalidArgument("sigma_w2 must be > 0".into()));
        }
        if self.cm.n_x() != self.model.n_x() || self.cm.n_u() != self.model.n_u() {
            return Err(SynthesisError::DimensionMismatch(format!(
                "cost matrices are for n_x={}, n_u={}, model has n_x={}, n_u={}",
                self.cm.n_x(),
                self.cm.n_u(),
                self.model.n_x(),
                self.model.n_u()
            )));
        }
        Ok(())
    }
}

/// Optimal values of the program variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableTrajectories {
    pub y: Vec<SymMatrix>,
    /// `P_1 … P_T`.
    pub p: Vec<SymMatrix>,
    #[serde(with = "crate::linalg::rows::seq")]
    pub z: Vec<Matrix>,
    pub s: Vec<SymMatrix>,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSearchPoint {
    pub p: f64,
    pub status: SolveStatus,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub program: String,
    pub policy: Policy,
    /// Program objective (worst-case cost bound for robust designs).
    pub j_wc: f64,
    pub p_star: Option<f64>,
    pub s_traces: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub line_search: Vec<LineSearchPoint>,
    pub trajectories: VariableTrajectories,
}

impl BuiltProgram {
    pub fn name(&self) -> &'static str {
        match self.kind {
            ProgramKind::Nominal => "nominal",
            ProgramKind::Robust(_) => "robust",
            ProgramKind::Dual(_) => "dual",
        }
    }

    /// Solves the program; anything but an optimal solve is an error.
    pub fn solve(&self, settings: &SolverSettings) -> Result<SynthesisResult, SynthesisError> {
        let sol = self.problem.solve(settings)?;
        if sol.status != SolveStatus::Optimal {
            return Err(SynthesisError::NotSolved {
                program: self.name().into(),
                status: sol.status,
            });
        }
        let x = &sol.x;
        let sym = |v: &crate::sdp::MatrixVar| SymMatrix::symmetrize(v.value(x));
        let traj = VariableTrajectories {
            y: self.vars.y.iter().map(sym).collect(),
            p: self.vars.p.iter().map(sym).collect(),
            z: self.vars.z.iter().map(|v| v.value(x)).collect(),
            s: self.vars.s.iter().map(sym).collect(),
            multipliers: self.vars.multipliers.iter().map(|e| e.eval(x)).collect(),
        };
        let policy = recover_policy(&traj.p, &traj.z, &traj.s)?;
        let p_star = match self.kind {
            ProgramKind::Nominal | ProgramKind::Robust(Multiplier::Variable) => None,
            ProgramKind::Robust(Multiplier::Fixed(p)) | ProgramKind::Dual(p) => Some(p),
        };
        Ok(SynthesisResult {
            program: self.name().into(),
            s_traces: policy.excitation_traces(),
            policy,
            j_wc: sol.objective_value,
            p_star,
            status: sol.status,
            iterations: sol.iterations,
            line_search: Vec::new(),
            trajectories: traj,
        })
    }
}

/// `K_t = Z_tᵀ P_t⁻¹`, `S_t` projected onto the PSD cone.
pub fn recover_policy(
    p: &[SymMatrix],
    z: &[Matrix],
    s: &[SymMatrix],
) -> Result<Policy, SynthesisError> {
    if z.len() != s.len() || p.len() < z.len() {
        return Err(SynthesisError::DimensionMismatch(format!(
            "{} covariances, {} Z blocks, {} excitation blocks",
            p.len(),
            z.len(),
            s.len()
        )));
    }
    let mut gains = Vec::with_capacity(z.len());
    let mut excitations = Vec::with_capacity(z.len());
    for (t, (zt, st)) in z.iter().zip(s).enumerate() {
        let lam = min_eig(&p[t])?;
        if lam <= SINGULAR_COVARIANCE_TOL {
            return Err(SynthesisError::SingularCovariance { t: t + 1, min_eig: lam });
        }
        // K = Zᵀ P⁻¹  ⇔  P Kᵀ = Z
        let kt = cholesky(&p[t])?.solve(zt);
        gains.push(kt.transpose());
        excitations.push(project_psd(st)?);
    }
    Ok(Policy::new(gains, excitations)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub samples: usize,
    /// Largest `−min_eig(P_{t+1} − (A+BK_t) P_t (A+BK_t)ᵀ − σ_w² I − B S_t Bᵀ)`
    /// over samples and steps (negative when every check has slack).
    pub worst_violation: f64,
    /// `(sample, t)` checks violated beyond the tolerance.
    pub failures: usize,
    pub tolerance: f64,
}

impl RobustnessReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks the Lyapunov inequalities of `result` against plants drawn on the
/// boundary of the uncertainty ellipsoid.
pub fn verify_robust(
    result: &SynthesisResult,
    model: &UncertaintyModel,
    sigma_w2: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<RobustnessReport, SynthesisError> {
    let tolerance = 1e-6;
    let policy = &result.policy;
    let p = &result.trajectories.p;
    let n_x = model.n_x();
    let noise = Matrix::identity(n_x, n_x) * sigma_w2;
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for _ in 0..samples {
        let (a, b) = boundary_sample(model, rng)?;
        for t in 1..=policy.len() {
            let closed = &a + &b * policy.gain(t);
            let rhs = &closed * p[t - 1].as_matrix() * closed.transpose()
                + &noise
                + &b * policy.excitation(t).as_matrix() * b.transpose();
            let gap = SymMatrix::symmetrize(p[t].as_matrix() - rhs);
            let v = -min_eig(&gap)?;
            worst = worst.max(v);
            if v > tolerance {
                failures += 1;
            }
        }
    }
    Ok(RobustnessReport {
        samples,
        worst_violation: worst,
        failures,
        tolerance,
    })
}

fn info_scale(model: &UncertaintyModel, sigma_w2: f64) -> Result<f64, SynthesisError> {
    let c_chi = chi2_quantile(chi2_dof(model.n_x(), model.n_u()), model.delta)?;
    Ok(1.0 / (c_chi * sigma_w2))
}

/// Information accumulated by the policy, `D_t` for `t = 1 … T-1`:
/// `(1/(c_χ σ_w²)) Σ_{l≤t} [[P_l, Z_l], [Z_lᵀ, Z_lᵀ P_l⁻¹ Z_l + S_l]]`.
pub fn exact_information(
    traj: &VariableTrajectories,
    model: &UncertaintyModel,
    sigma_w2: f64,
) -> Result<Vec<SymMatrix>, SynthesisError> {
    let scale = info_scale(model, sigma_w2)?;
    let mut acc = Matrix::zeros(model.n_x() + model.n_u(), model.n_x() + model.n_u());
    let mut out = Vec::with_capacity(traj.z.len());
    for (t, (z, s)) in traj.z.iter().zip(&traj.s).enumerate() {
        let p = &traj.p[t];
        let lower = z.transpose() * cholesky(p)?.solve(z) + s.as_matrix();
        acc += info_block(p.as_matrix(), z, &lower) * scale;
        out.push(SymMatrix::symmetrize(acc.clone()));
    }
    Ok(out)
}

/// Affine lower bound `D̂_t` built with comparison gains `K̄`.
pub fn information_lower_bound(
    traj: &VariableTrajectories,
    k_bar: &[Matrix],
    model: &UncertaintyModel,
    sigma_w2: f64,
) -> Result<Vec<SymMatrix>, SynthesisError> {
    let scale = info_scale(model, sigma_w2)?;
    let mut acc = Matrix::zeros(model.n_x() + model.n_u(), model.n_x() + model.n_u());
    let mut out = Vec::with_capacity(traj.z.len());
    for (t, (z, s)) in traj.z.iter().zip(&traj.s).enumerate() {
        let p = traj.p[t].as_matrix();
        let k = &k_bar[t];
        let kz = z.transpose() * k.transpose();
        let lower = &kz + kz.transpose() - k * p * k.transpose() + s.as_matrix();
        acc += info_block(p, z, &lower) * scale;
        out.push(SymMatrix::symmetrize(acc.clone()));
    }
    Ok(out)
}

fn info_block(p: &Matrix, z: &Matrix, lower: &Matrix) -> Matrix {
    let (n_x, n_u) = z.shape();
    let mut m = Matrix::zeros(n_x + n_u, n_x + n_u);
    m.view_mut((0, 0), (n_x, n_x)).copy_from(p);
    m.view_mut((0, n_x), (n_x, n_u)).copy_from(z);
    m.view_mut((n_x, 0), (n_u, n_x)).copy_from(&z.transpose());
    m.view_mut((n_x, n_x), (n_u, n_u)).copy_from(lower);
    m
}

pub fn synthesize_nominal(spec: &SynthesisSpec) -> Result<SynthesisResult, SynthesisError> {
    build_nominal(spec)?.solve(&spec.settings)
}

pub fn synthesize_robust(spec: &SynthesisSpec) -> Result<SynthesisResult, SynthesisError> {
    build_robust(spec)?.solve(&spec.settings)
}

fn outcome(p: f64, r: &Result<SynthesisResult, SynthesisError>) -> Result<LineSearchPoint, SynthesisError> {
    match r {
        Ok(res) => Ok(LineSearchPoint {
            p,
            status: SolveStatus::Optimal,
            objective: Some(res.j_wc),
        }),
        Err(SynthesisError::NotSolved { status, .. }) => Ok(LineSearchPoint {
            p,
            status: *status,
            objective: None,
        }),
        // a breakdown at one multiplier does not end the search
        Err(SynthesisError::Sdp(SdpError::NumericalBreakdown { .. }))
        | Err(SynthesisError::SingularCovariance { .. }) => Ok(LineSearchPoint {
            p,
            status: SolveStatus::MaxIter,
            objective: None,
        }),
        Err(e) => Err(e.clone()),
    }
}

/// Minimizes `J(p)` over a fixed-multiplier family: grid search (solves run
/// concurrently), then golden-section steps in `log p` around the best grid
/// point. Ties go to the smaller `p`.
pub fn line_search<F>(grid: &[f64], refine_steps: usize, solve_at: F) -> Result<SynthesisResult, SynthesisError>
where
    F: Fn(f64) -> Result<SynthesisResult, SynthesisError> + Sync,
{
    if grid.is_empty() {
        return Err(SynthesisError::InvalidArgument("empty multiplier grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite multipliers"));
    grid.dedup();
    let runs: Vec<(f64, Result<SynthesisResult, SynthesisError>)> =
        grid.par_iter().map(|&p| (p, solve_at(p))).collect();
    let mut table = Vec::with_capacity(runs.len() + refine_steps);
    let mut best: Option<(usize, SynthesisResult)> = None;
    for (i, (p, r)) in runs.into_iter().enumerate() {
        table.push(outcome(p, &r)?);
        if let Ok(res) = r {
            if best.as_ref().is_none_or(|(_, b)| res.j_wc < b.j_wc) {
                best = Some((i, res));
            }
        }
    }
    let Some((idx, mut best)) = best else {
        return Err(SynthesisError::AllInfeasible { table });
    };

    if refine_steps > 0 && grid.len() > 1 {
        let lo = grid[idx.saturating_sub(1)].ln();
        let hi = grid[(idx + 1).min(grid.len() - 1)].ln();
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (lo, hi);
        let eval = |lp: f64, table: &mut Vec<LineSearchPoint>, best: &mut SynthesisResult| {
            let p = lp.exp();
            let r = solve_at(p);
            let point = outcome(p, &r)?;
            let j = point.objective.unwrap_or(f64::INFINITY);
            table.push(point);
            if let Ok(res) = r {
                let better = res.j_wc < best.j_wc
                    || (res.j_wc == best.j_wc && Some(p) < best.p_star);
                if better {
                    *best = res;
                }
            }
            Ok::<f64, SynthesisError>(j)
        };
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut fc = eval(c, &mut table, &mut best)?;
        let mut fd = eval(d, &mut table, &mut best)?;
        for _ in 2..refine_steps {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = eval(c, &mut table, &mut best)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = eval(d, &mut table, &mut best)?;
            }
        }
    }
    best.line_search = table;
    Ok(best)
}

/// Dual design: comparison gains default to the nominal policy, then the
/// multiplier is found by [`line_search`].
pub fn synthesize_dual(spec: &SynthesisSpec) -> Result<SynthesisResult, SynthesisError> {
    let mut spec = spec.clone();
    if spec.k_bar.is_none() {
        let nominal = synthesize_nominal(&spec)?;
        spec.k_bar = Some(nominal.policy.gains().to_vec());
    }
    let spec = &spec;
    line_search(&spec.p_grid, spec.refine_steps, |p| build_dual(spec, p)?.solve(&spec.settings))
}

/// Robust design restricted to a constant multiplier, found by line search.
pub fn synthesize_robust_constant(spec: &SynthesisSpec) -> Result<SynthesisResult, SynthesisError> {
    line_search(&spec.p_grid, spec.refine_steps, |p| {
        build_robust_fixed(spec, p)?.solve(&spec.settings)
    })
}

/// Validity check of the information bound: `D_t − D̂_t ⪰ −tol` for every `t`; returns the
/// smallest eigenvalue seen.
pub fn information_gap(
    traj: &VariableTrajectories,
    k_bar: &[Matrix],
    model: &UncertaintyModel,
    sigma_w2: f64,
) -> Result<f64, SynthesisError> {
    let exact = exact_information(traj, model, sigma_w2)?;
    let bound = information_lower_bound(traj, k_bar, model, sigma_w2)?;
    let mut worst = f64::INFINITY;
    for (d, dh) in exact.iter().zip(&bound) {
        worst = worst.min(min_eig(&d.sub(dh))?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{evaluate_policy, propagate_covariance};
    use crate::lti::LtiSystem;
    use crate::riccati::{drde_cost, drde_solve};
    use approx::assert_relative_eq;

    fn scalar_spec(horizon: usize) -> SynthesisSpec {
        let model = UncertaintyModel::new(
            Matrix::from_element(1, 1, 0.5),
            Matrix::from_element(1, 1, 1.0),
            SymMatrix::from_diagonal(&[50.0, 50.0]),
            0.05,
        )
        .unwrap();
        let cm = CostMatrices::new(SymMatrix::identity(1), SymMatrix::identity(1)).unwrap();
        SynthesisSpec::new(model, cm, 1.0, horizon)
    }

    #[test]
    fn nominal_scalar_matches_riccati() {
        let mut spec = scalar_spec(3);
        spec.settings.feas_tol = 1e-10;
        spec.settings.gap_tol = 1e-10;
        let res = synthesize_nominal(&spec).unwrap();
        let sol = drde_solve(
            &spec.model.a_hat,
            &spec.model.b_hat,
            spec.cm.q(),
            spec.cm.r(),
            3,
        )
        .unwrap();
        assert_relative_eq!(res.j_wc, drde_cost(&sol, 1.0), max_relative = 1e-6);
        for t in 1..=2 {
            let (a, b) = (res.policy.gain(t)[(0, 0)], sol.gain(t)[(0, 0)]);
            assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
        }
        assert!(res.s_traces.iter().all(|&s| s <= 1e-6));
    }

    #[test]
    fn nominal_covariances_are_tight() {
        let spec = scalar_spec(6);
        let res = synthesize_nominal(&spec).unwrap();
        let sys = LtiSystem::new(spec.model.a_hat.clone(), spec.model.b_hat.clone(), 1.0).unwrap();
        let cov = propagate_covariance(&sys, &res.policy).unwrap();
        for (t, p) in res.trajectories.p.iter().enumerate() {
            assert_relative_eq!(p[(0, 0)], cov.cov(t + 1)[(0, 0)], max_relative = 1e-5);
        }
        let exact = evaluate_policy(&sys, &spec.cm, &res.policy).unwrap();
        assert_relative_eq!(exact.j_total, res.j_wc, max_relative = 1e-6);
    }

    #[test]
    fn recover_policy_examples() {
        let p = vec![SymMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap(); 2];
        let k = Matrix::from_row_slice(1, 2, &[0.4, -1.2]);
        let z = vec![p[0].as_matrix() * k.transpose(), Matrix::zeros(2, 1)];
        let s = vec![SymMatrix::from_diagonal(&[1e-12]), SymMatrix::from_diagonal(&[-1e-12])];
        let pol = recover_policy(&p, &z, &s).unwrap();
        assert_relative_eq!(pol.gain(1), &k, epsilon = 1e-9);
        assert_eq!(pol.gain(2).amax(), 0.0);
        assert!(pol.excitation(2)[(0, 0)] >= 0.0);
        assert!(pol.excitation(1).trace() <= 2e-12);

        let singular = vec![SymMatrix::from_diagonal(&[1.0, 0.0])];
        let err = recover_policy(&singular, &z[..1], &s[..1]).unwrap_err();
        assert!(matches!(err, SynthesisError::SingularCovariance { t: 1, .. }));
    }

    #[test]
    fn robust_not_cheaper_than_nominal() {
        let spec = scalar_spec(5);
        let nom = synthesize_nominal(&spec).unwrap();
        let rob = synthesize_robust(&spec).unwrap();
        assert!(rob.j_wc >= nom.j_wc * (1.0 - 1e-7));
        let mut rng = RngStream::new(3, 0);
        let report = verify_robust(&rob, &spec.model, 1.0, 50, &mut rng).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn line_search_singleton_and_single_feasible() {
        let spec = scalar_spec(4);
        let direct = build_robust_fixed(&spec, 0.3).unwrap().solve(&spec.settings).unwrap();
        let searched = line_search(&[0.3], 0, |p| build_robust_fixed(&spec, p)?.solve(&spec.settings)).unwrap();
        assert_relative_eq!(direct.j_wc, searched.j_wc, max_relative = 1e-12);

        let picky = |p: f64| {
            if p == 2.0 {
                build_robust_fixed(&spec, p)?.solve(&spec.settings)
            } else {
                Err(SynthesisError::NotSolved {
                    program: "robust".into(),
                    status: SolveStatus::Infeasible,
                })
            }
        };
        let res = line_search(&[0.5, 1.0, 2.0, 4.0], 0, picky).unwrap();
        assert_eq!(res.p_star, Some(2.0));
        assert_eq!(res.line_search.len(), 4);
        let none = line_search(&[1.0], 0, |_| {
            Err(SynthesisError::NotSolved {
                program: "robust".into(),
                status: SolveStatus::Infeasible,
            })
        });
        assert!(matches!(none, Err(SynthesisError::AllInfeasible { .. })));
    }

    #[test]
    fn bound_is_tight_at_comparison_gains() {
        let spec = scalar_spec(5);
        let res = synthesize_robust(&spec).unwrap();
        let gains = res.policy.gains().to_vec();
        let gap = information_gap(&res.trajectories, &gains, &spec.model, 1.0).unwrap();
        assert!(gap.abs() < 1e-7, "gap {gap}");
        let shifted: Vec<Matrix> = gains.iter().map(|k| k.add_scalar(0.3)).collect();
        let gap = information_gap(&res.trajectories, &shifted, &spec.model, 1.0).unwrap();
        assert!(gap >= -1e-7);
    }
}
