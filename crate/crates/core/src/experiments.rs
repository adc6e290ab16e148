//! End-to-end studies: explore-then-commit, nominal vs robust design, and
//! dual design, each reproducible from a seed.

use crate::evaluation::{evaluate_policy, CostMatrices, CostReport, Policy};
use crate::linalg::{spectral_radius, Matrix, SymMatrix};
use crate::lti::{rollout_with, IdDataset, IdProtocol, LtiSystem, RngStream};
use crate::riccati::{drde_cost, drde_solve};
use crate::sdp::SolverSettings;
use crate::synthesis::{
    synthesize_dual, synthesize_nominal, synthesize_robust, SynthesisResult, SynthesisSpec,
};
use crate::sysid::{coarse_id, least_squares_fit, SysidError, UncertaintyModel};
use crate::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Plant with i.i.d. standard normal entries, `A` rescaled to a spectral
/// radius drawn uniformly from `[rho_min, rho_max]`.
pub fn random_stable_plant(
    n_x: usize,
    n_u: usize,
    rho_min: f64,
    rho_max: f64,
    sigma_w2: f64,
    rng: &mut RngStream,
) -> Result<LtiSystem, Error> {
    if !(0.0 < rho_min && rho_min <= rho_max && rho_max < 1.0) {
        return Err(Error::Config(format!(
            "spectral radius range [{rho_min}, {rho_max}] must satisfy 0 < min <= max < 1"
        )));
    }
    let a0 = rng.normal_matrix(n_x, n_x);
    let b = rng.normal_matrix(n_x, n_u);
    let target = rng.uniform(rho_min, rho_max);
    let rho = spectral_radius(&a0);
    let a = if rho > 0.0 { a0 * (target / rho) } else { a0 };
    Ok(LtiSystem::new(a, b, sigma_w2)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreCommitRow {
    pub t_sw: usize,
    /// Expected cost of `t = 1 … T_sw-1` under random inputs.
    pub j_id: f64,
    /// Mean over realizations of the expected cost of `t = T_sw … T`
    /// given the data collected so far.
    pub j_k: f64,
    pub j_tot: f64,
    /// Standard error of `j_k` (and `j_tot`) across realizations.
    pub stderr: f64,
    /// Realizations whose data could not identify the plant (model set to 0).
    pub rank_deficient: usize,
}

/// `Σ_k E[x_kᵀ V x_k]` from `x_start` on `[T_sw, T]` with gains `gains` on
/// the true plant: `x_startᵀ V_1 x_start + σ_w² Σ_{k≥2} tr V_k`.
fn cost_to_go(sys: &LtiSystem, cm: &CostMatrices, gains: &[Matrix], x_start: &Matrix) -> f64 {
    let q = cm.q().as_matrix();
    let r = cm.r().as_matrix();
    let mut v = q.clone();
    let mut noise_term = 0.0;
    for k in gains.iter().rev() {
        noise_term += v.trace();
        let closed = &sys.a + &sys.b * k;
        v = q + k.transpose() * r * k + closed.transpose() * &v * &closed;
    }
    (x_start.transpose() * &v * x_start)[(0, 0)] + sys.sigma_w2 * noise_term
}

/// Identify on `[1, T_sw)` with `u_t ~ N(0, σ_u² I)`, then apply the Riccati
/// gains of the fitted model on `[T_sw, T]`. Realization `r` uses
/// `rng.child(r)` for every switching time, so rows share their noise.
pub fn run_explore_commit(
    sys: &LtiSystem,
    cm: &CostMatrices,
    horizon: usize,
    sigma_u2: f64,
    t_sw: &[usize],
    n_realizations: usize,
    rng: &RngStream,
) -> Result<Vec<ExploreCommitRow>, Error> {
    if let Some(&bad) = t_sw.iter().find(|&&t| t <= 1 || t >= horizon) {
        return Err(Error::Config(format!("t_sw = {bad} must lie in (1, {horizon})")));
    }
    if n_realizations == 0 {
        return Err(Error::Config("n_realizations must be >= 1".into()));
    }
    let (n_x, n_u) = (sys.n_x(), sys.n_u());

    // exact ID-phase cost: zero gain, excitation σ_u² I
    let id_policy = Policy::new(
        vec![Matrix::zeros(n_u, n_x); horizon - 1],
        vec![SymMatrix::identity(n_u).scaled(sigma_u2); horizon - 1],
    )?;
    let id_cost = evaluate_policy(sys, cm, &id_policy)?.j_step();
    let mut j_id_prefix = vec![0.0; horizon];
    for t in 1..horizon {
        j_id_prefix[t] = j_id_prefix[t - 1] + id_cost[t - 1];
    }

    let sigma_u = sigma_u2.sqrt();
    let noise_std = sys.sigma_w2.sqrt();
    let per_real: Vec<Vec<(f64, bool)>> = (0..n_realizations)
        .into_par_iter()
        .map(|r| -> Result<Vec<(f64, bool)>, Error> {
            let mut stream = rng.child(r as u64);
            let traj = rollout_with(sys, horizon - 1, &mut stream, |t, _, rng| {
                if t == 0 {
                    (crate::linalg::Vector::zeros(n_u), crate::linalg::Vector::zeros(n_u))
                } else {
                    let u = rng.normal_vec(n_u) * sigma_u;
                    (u.clone(), u)
                }
            }, noise_std)?;
            t_sw.iter()
                .map(|&ts| {
                    let data = IdDataset::from_trajectory_window(&traj, 1, ts)?;
                    let (a_hat, b_hat, deficient) = match least_squares_fit(&data) {
                        Ok((a, b)) => (a, b, false),
                        Err(SysidError::RankDeficient { .. }) => {
                            (Matrix::zeros(n_x, n_x), Matrix::zeros(n_x, n_u), true)
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let sol = drde_solve(&a_hat, &b_hat, cm.q(), cm.r(), horizon - ts + 1)?;
                    let x0 = Matrix::from_column_slice(n_x, 1, traj.states[ts].as_slice());
                    Ok((cost_to_go(sys, cm, sol.gains(), &x0), deficient))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let n = n_realizations as f64;
    Ok(t_sw
        .iter()
        .enumerate()
        .map(|(i, &ts)| {
            let vals: Vec<f64> = per_real.iter().map(|row| row[i].0).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = if n_realizations > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let j_id = j_id_prefix[ts - 1];
            ExploreCommitRow {
                t_sw: ts,
                j_id,
                j_k: mean,
                j_tot: j_id + mean,
                stderr: (var / n).sqrt(),
                rank_deficient: per_real.iter().filter(|row| row[i].1).count(),
            }
        })
        .collect())
}

/// Solver settings and line-search grid shared by the design drivers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignSettings {
    /// Overrides the default multiplier grid.
    pub p_grid: Option<Vec<f64>>,
    pub solver: SolverSettings,
}

impl DesignSettings {
    /// A validated spec for `model` with these settings applied.
    pub fn spec(&self, model: UncertaintyModel, cm: &CostMatrices, sigma_w2: f64, horizon: usize) -> Result<SynthesisSpec, Error> {
        let mut spec = SynthesisSpec::new(model, cm.clone(), sigma_w2, horizon);
        if let Some(grid) = &self.p_grid {
            spec.p_grid = grid.clone();
        }
        spec.settings = self.solver;
        spec.validate()?;
        Ok(spec)
    }
}

/// Gains of one design, `K_1 … K_{T-1}`, plus its program objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutcome {
    #[serde(with = "crate::linalg::rows::seq")]
    pub gains: Vec<Matrix>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub model: UncertaintyModel,
    pub drde: DesignOutcome,
    /// `Err` carries the solver failure message.
    pub nominal: Result<DesignOutcome, String>,
    pub robust: Result<DesignOutcome, String>,
}

fn outcome(r: Result<SynthesisResult, crate::synthesis::SynthesisError>) -> Result<DesignOutcome, String> {
    r.map(|res| DesignOutcome {
        gains: res.policy.gains().to_vec(),
        cost: res.j_wc,
    })
    .map_err(|e| e.to_string())
}

/// Coarse-ID, then Riccati, nominal and robust designs on the estimate.
pub fn run_compare_nominal_robust(
    sys: &LtiSystem,
    cm: &CostMatrices,
    horizon: usize,
    protocol: &IdProtocol,
    delta: f64,
    settings: &DesignSettings,
    rng: &RngStream,
) -> Result<CompareReport, Error> {
    let (_, model) = coarse_id(sys, protocol, delta, rng)?;
    compare_on_model(model, cm, sys.sigma_w2, horizon, settings)
}

/// Riccati, nominal and robust designs for a given model.
pub fn compare_on_model(
    model: UncertaintyModel,
    cm: &CostMatrices,
    sigma_w2: f64,
    horizon: usize,
    settings: &DesignSettings,
) -> Result<CompareReport, Error> {
    let sol = drde_solve(&model.a_hat, &model.b_hat, cm.q(), cm.r(), horizon)?;
    let drde = DesignOutcome {
        gains: sol.gains().to_vec(),
        cost: drde_cost(&sol, sigma_w2),
    };
    let spec = settings.spec(model.clone(), cm, sigma_w2, horizon)?;
    Ok(CompareReport {
        nominal: outcome(synthesize_nominal(&spec)),
        robust: outcome(synthesize_robust(&spec)),
        model,
        drde,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualReport {
    pub model: UncertaintyModel,
    /// Comparison gains (nominal design on the estimate).
    #[serde(with = "crate::linalg::rows::seq")]
    pub nominal_gains: Vec<Matrix>,
    pub design: SynthesisResult,
    /// Expected cost of the dual policy on the true plant.
    pub true_cost: CostReport,
}

/// Coarse-ID, nominal design for the comparison gains, multiplier line
/// search on the dual program, then exact evaluation on the true plant.
pub fn run_dual(
    sys: &LtiSystem,
    cm: &CostMatrices,
    horizon: usize,
    protocol: &IdProtocol,
    delta: f64,
    settings: &DesignSettings,
    rng: &RngStream,
) -> Result<DualReport, Error> {
    let (_, model) = coarse_id(sys, protocol, delta, rng)?;
    dual_on_model(sys, model, cm, horizon, settings)
}

pub fn dual_on_model(
    sys: &LtiSystem,
    model: UncertaintyModel,
    cm: &CostMatrices,
    horizon: usize,
    settings: &DesignSettings,
) -> Result<DualReport, Error> {
    let mut spec = settings.spec(model.clone(), cm, sys.sigma_w2, horizon)?;
    let nominal = synthesize_nominal(&spec)?;
    spec.k_bar = Some(nominal.policy.gains().to_vec());
    let design = synthesize_dual(&spec)?;
    let true_cost = evaluate_policy(sys, cm, &design.policy)?;
    Ok(DualReport {
        model,
        nominal_gains: nominal.policy.gains().to_vec(),
        design,
        true_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::example_system_one;

    fn cm(n_x: usize, n_u: usize) -> CostMatrices {
        CostMatrices::new(SymMatrix::identity(n_x), SymMatrix::identity(n_u)).unwrap()
    }

    #[test]
    fn random_plant_is_stable_and_seeded() {
        for i in 0..20 {
            let mut r1 = RngStream::new(5, i);
            let mut r2 = RngStream::new(5, i);
            let s1 = random_stable_plant(3, 2, 0.5, 0.95, 0.25, &mut r1).unwrap();
            let s2 = random_stable_plant(3, 2, 0.5, 0.95, 0.25, &mut r2).unwrap();
            assert_eq!(s1, s2);
            let rho = spectral_radius(&s1.a);
            assert!((0.5 - 1e-9..=0.95 + 1e-9).contains(&rho), "rho {rho}");
        }
        let mut r = RngStream::new(0, 0);
        assert!(random_stable_plant(3, 2, 0.5, 1.2, 0.25, &mut r).is_err());
    }

    #[test]
    fn noiseless_phases_split_cleanly() {
        // σ_w² = 0: cost only from excitation; the ID phase grows with T_sw
        let sys = example_system_one(0.0);
        let rows = run_explore_commit(&sys, &cm(3, 2), 30, 1.0, &[5, 10, 20, 29], 4, &RngStream::new(1, 0)).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].j_id > w[0].j_id);
        }
        // noiseless data identify the plant exactly once there are enough samples
        assert_eq!(rows[0].rank_deficient, 4);
        assert_eq!(rows[1].rank_deficient, 0);
    }

    #[test]
    fn cost_to_go_matches_covariance_cost() {
        // from x_1 ~ N(0, σ² I) the expected cost-to-go equals the covariance-propagation cost
        let sys = example_system_one(0.5);
        let cmat = cm(3, 2);
        let sol = drde_solve(&sys.a, &sys.b, cmat.q(), cmat.r(), 12).unwrap();
        let mut acc = 0.0;
        for i in 0..3 {
            let mut e = Matrix::zeros(3, 1);
            e[(i, 0)] = 0.5f64.sqrt();
            acc += cost_to_go(&sys, &cmat, sol.gains(), &e);
        }
        // averaging x_1ᵀV x_1 over the basis gives σ² tr V_1 but counts the
        // noise term three times
        let one = cost_to_go(&sys, &cmat, sol.gains(), &Matrix::zeros(3, 1));
        let expected = acc - 2.0 * one;
        assert!((expected - drde_cost(&sol, 0.5)).abs() < 1e-9 * expected);
    }

    #[test]
    fn explore_commit_is_deterministic() {
        let sys = example_system_one(0.25);
        let go = || run_explore_commit(&sys, &cm(3, 2), 40, 1.0, &[8, 20, 35], 6, &RngStream::new(9, 0)).unwrap();
        assert_eq!(go(), go());
    }

    #[test]
    fn explore_commit_rejects_bad_switch() {
        let sys = example_system_one(0.25);
        let rng = RngStream::new(0, 0);
        assert!(run_explore_commit(&sys, &cm(3, 2), 40, 1.0, &[1], 2, &rng).is_err());
        assert!(run_explore_commit(&sys, &cm(3, 2), 40, 1.0, &[40], 2, &rng).is_err());
    }
}
