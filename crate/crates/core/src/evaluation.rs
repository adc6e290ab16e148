//! Exact and sampled evaluation of time-varying policies
//! `u_t = K_t x_t + e_t`, `e_t ~ N(0, S_t)`.
//!
//! The exact route propagates the state covariance
//! `P_{t+1} = (A + B K_t) P_t (A + B K_t)ᵀ + σ_w² I + B S_t Bᵀ` from
//! `P_1 = σ_w² I` and reads the cost off the covariances:
//!
//! `J = Σ_{t=1}^{T-1} [tr((Q + K_tᵀ R K_t) P_t) + tr(R S_t)] + tr(Q P_T)`.
//!
//! The sampled route averages the realized quadratic cost over independent
//! rollouts; the two must agree within Monte Carlo error.

use crate::linalg::{min_eig, psd_sqrt, LinalgError, Matrix, SymMatrix};
use crate::lti::{rollout, LtiError, LtiSystem, RngStream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Excitation covariances may dip this far below zero (solver boundary).
pub const EXCITATION_PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Time-varying gains `K_1 … K_{T-1}` and excitation covariances
/// `S_1 … S_{T-1}`. Accessors are 1-based in `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    #[serde(with = "crate::linalg::rows::seq")]
    gains: Vec<Matrix>,
    excitations: Vec<SymMatrix>,
}

impl Policy {
    pub fn new(gains: Vec<Matrix>, excitations: Vec<SymMatrix>) -> Result<Self, EvalError> {
        if gains.is_empty() {
            return Err(EvalError::InvalidArgument("policy needs at least one step".into()));
        }
        if gains.len() != excitations.len() {
            return Err(EvalError::DimensionMismatch(format!(
                "{} gains but {} excitation covariances",
                gains.len(),
                excitations.len()
            )));
        }
        let (n_u, n_x) = gains[0].shape();
        for (i, (k, s)) in gains.iter().zip(&excitations).enumerate() {
            if k.shape() != (n_u, n_x) || s.dim() != n_u {
                return Err(EvalError::DimensionMismatch(format!(
                    "step {} has gain {:?} and excitation {}x{}, expected {n_u}x{n_x} and {n_u}x{n_u}",
                    i + 1,
                    k.shape(),
                    s.dim(),
                    s.dim()
                )));
            }
            let lam = min_eig(s)?;
            if lam < -EXCITATION_PSD_TOL {
                return Err(EvalError::InvalidArgument(format!(
                    "excitation covariance at t={} has eigenvalue {lam:e}",
                    i + 1
                )));
            }
        }
        Ok(Self { gains, excitations })
    }

    /// Pure state feedback, `S_t = 0`.
    pub fn feedback_only(gains: Vec<Matrix>) -> Result<Self, EvalError> {
        let n_u = gains.first().map(|k| k.nrows()).unwrap_or(1);
        let excitations = vec![SymMatrix::zeros(n_u); gains.len()];
        Self::new(gains, excitations)
    }

    /// `len` steps of `K_t = 0`, `S_t = 0`.
    pub fn zero(n_x: usize, n_u: usize, len: usize) -> Self {
        Self {
            gains: vec![Matrix::zeros(n_u, n_x); len],
            excitations: vec![SymMatrix::zeros(n_u); len],
        }
    }

    /// Number of decision steps, `T - 1`.
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Horizon `T` covered by the policy.
    pub fn horizon(&self) -> usize {
        self.gains.len() + 1
    }

    pub fn n_x(&self) -> usize {
        self.gains[0].ncols()
    }

    pub fn n_u(&self) -> usize {
        self.gains[0].nrows()
    }

    /// `K_t` for `t` in `1..=len()`.
    pub fn gain(&self, t: usize) -> &Matrix {
        &self.gains[t - 1]
    }

    /// `S_t` for `t` in `1..=len()`.
    pub fn excitation(&self, t: usize) -> &SymMatrix {
        &self.excitations[t - 1]
    }

    pub fn gains(&self) -> &[Matrix] {
        &self.gains
    }

    pub fn excitations(&self) -> &[SymMatrix] {
        &self.excitations
    }

    pub fn set_excitation(&mut self, t: usize, s: SymMatrix) -> Result<(), EvalError> {
        if s.dim() != self.n_u() {
            return Err(EvalError::DimensionMismatch(format!(
                "excitation must be {0}x{0}",
                self.n_u()
            )));
        }
        self.excitations[t - 1] = s;
        Ok(())
    }

    /// `tr(S_t)` for every step.
    pub fn excitation_traces(&self) -> Vec<f64> {
        self.excitations.iter().map(|s| s.trace()).collect()
    }
}

/// State and input weights with cached symmetric square roots.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    q: SymMatrix,
    r: SymMatrix,
    q_sqrt: SymMatrix,
    r_sqrt: SymMatrix,
}

impl CostMatrices {
    pub fn new(q: SymMatrix, r: SymMatrix) -> Result<Self, EvalError> {
        let q_sqrt = psd_sqrt(&q, 1e-12).map_err(|e| {
            EvalError::InvalidArgument(format!("Q must be positive semidefinite: {e}"))
        })?;
        let r_sqrt = psd_sqrt(&r, 1e-12).map_err(|e| {
            EvalError::InvalidArgument(format!("R must be positive semidefinite: {e}"))
        })?;
        Ok(Self {
            q,
            r,
            q_sqrt,
            r_sqrt,
        })
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    pub fn r(&self) -> &SymMatrix {
        &self.r
    }

    pub fn q_sqrt(&self) -> &SymMatrix {
        &self.q_sqrt
    }

    pub fn r_sqrt(&self) -> &SymMatrix {
        &self.r_sqrt
    }

    pub fn n_x(&self) -> usize {
        self.q.dim()
    }

    pub fn n_u(&self) -> usize {
        self.r.dim()
    }
}

impl Serialize for CostMatrices {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Raw<'a> {
            q: &'a SymMatrix,
            r: &'a SymMatrix,
        }
        Raw {
            q: &self.q,
            r: &self.r,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CostMatrices {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            q: SymMatrix,
            r: SymMatrix,
        }
        let raw = Raw::deserialize(d)?;
        CostMatrices::new(raw.q, raw.r).map_err(serde::de::Error::custom)
    }
}

/// `P_1 … P_T` with `P_t = E[x_t x_tᵀ]`; `cov(t)` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTrajectory {
    covariances: Vec<SymMatrix>,
}

impl CovarianceTrajectory {
    pub fn new(covariances: Vec<SymMatrix>) -> Self {
        Self { covariances }
    }

    pub fn horizon(&self) -> usize {
        self.covariances.len()
    }

    pub fn cov(&self, t: usize) -> &SymMatrix {
        &self.covariances[t - 1]
    }

    pub fn as_slice(&self) -> &[SymMatrix] {
        &self.covariances
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub j_total: f64,
    /// `J_t^x = E[x_tᵀ (Q + K_tᵀ R K_t) x_t]`, `t = 1 … T-1`.
    pub j_x: Vec<f64>,
    /// `J_t^e = E[e_tᵀ R e_t]`, `t = 1 … T-1`.
    pub j_e: Vec<f64>,
    /// `E[x_Tᵀ Q x_T]`.
    pub j_terminal: f64,
    /// Standard error of `j_total`; only set by Monte Carlo estimates.
    pub stderr: Option<f64>,
}

impl CostReport {
    /// Per-timestep total `J_t^x + J_t^e`.
    pub fn j_step(&self) -> Vec<f64> {
        self.j_x.iter().zip(&self.j_e).map(|(x, e)| x + e).collect()
    }
}

fn check_dims(sys: &LtiSystem, policy: &Policy) -> Result<(), EvalError> {
    if policy.n_x() != sys.n_x() || policy.n_u() != sys.n_u() {
        return Err(EvalError::DimensionMismatch(format!(
            "policy gains are {}x{}, system has n_u={} n_x={}",
            policy.n_u(),
            policy.n_x(),
            sys.n_u(),
            sys.n_x()
        )));
    }
    Ok(())
}

/// Closed-loop covariances `P_1 … P_T` under `policy` (with `T = policy.horizon()`).
pub fn propagate_covariance(
    sys: &LtiSystem,
    policy: &Policy,
) -> Result<CovarianceTrajectory, EvalError> {
    check_dims(sys, policy)?;
    let n_x = sys.n_x();
    let noise = Matrix::identity(n_x, n_x) * sys.sigma_w2;
    let mut covs = Vec::with_capacity(policy.horizon());
    covs.push(SymMatrix::symmetrize(noise.clone()));
    for t in 1..=policy.len() {
        let closed = &sys.a + &sys.b * policy.gain(t);
        let p = covs[t - 1].as_matrix();
        let next = &closed * p * closed.transpose()
            + &noise
            + &sys.b * policy.excitation(t).as_matrix() * sys.b.transpose();
        covs.push(SymMatrix::symmetrize(next));
    }
    Ok(CovarianceTrajectory::new(covs))
}

fn trace_product(a: &Matrix, b: &Matrix) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// Expected cost from the covariance trajectory.
pub fn covariance_cost(
    cm: &CostMatrices,
    policy: &Policy,
    cov: &CovarianceTrajectory,
) -> Result<CostReport, EvalError> {
    if cov.horizon() != policy.horizon() {
        return Err(EvalError::DimensionMismatch(format!(
            "covariance trajectory has {} entries, policy horizon is {}",
            cov.horizon(),
            policy.horizon()
        )));
    }
    if cm.n_x() != policy.n_x() || cm.n_u() != policy.n_u() {
        return Err(EvalError::DimensionMismatch("cost matrices do not match policy".into()));
    }
    let q = cm.q().as_matrix();
    let r = cm.r().as_matrix();
    let mut j_x = Vec::with_capacity(policy.len());
    let mut j_e = Vec::with_capacity(policy.len());
    for t in 1..=policy.len() {
        let k = policy.gain(t);
        let m = q + k.transpose() * r * k;
        j_x.push(trace_product(&m, cov.cov(t)));
        j_e.push(trace_product(r, policy.excitation(t)));
    }
    // tr(Q P_T), i.e. E[x_Tᵀ Q x_T]
    let j_terminal = trace_product(q, cov.cov(policy.horizon()));
    let j_total = j_x.iter().sum::<f64>() + j_e.iter().sum::<f64>() + j_terminal;
    Ok(CostReport {
        j_total,
        j_x,
        j_e,
        j_terminal,
        stderr: None,
    })
}

/// Convenience: propagate and evaluate in one call.
pub fn evaluate_policy(
    sys: &LtiSystem,
    cm: &CostMatrices,
    policy: &Policy,
) -> Result<CostReport, EvalError> {
    let cov = propagate_covariance(sys, policy)?;
    covariance_cost(cm, policy, &cov)
}

/// Sample-mean estimate of the expected cost over `n_real` rollouts.
/// Realization `i` uses `rng.child(i)`.
pub fn monte_carlo_cost(
    sys: &LtiSystem,
    policy: &Policy,
    cm: &CostMatrices,
    n_real: usize,
    rng: &RngStream,
) -> Result<CostReport, EvalError> {
    if n_real < 2 {
        return Err(EvalError::InvalidArgument("n_real must be >= 2".into()));
    }
    check_dims(sys, policy)?;
    let horizon = policy.horizon();
    let q = cm.q().as_matrix();
    let r = cm.r().as_matrix();
    let samples: Vec<(f64, Vec<f64>, Vec<f64>, f64)> = (0..n_real)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng.child(i as u64);
            let traj = rollout(sys, policy, horizon, &mut stream)?;
            let mut total = 0.0;
            let mut jx = Vec::with_capacity(horizon - 1);
            let mut je = Vec::with_capacity(horizon - 1);
            for t in 1..horizon {
                let x = &traj.states[t];
                let u = &traj.inputs[t];
                let e = &traj.excitations[t];
                let kx = policy.gain(t) * x;
                total += x.dot(&(q * x)) + u.dot(&(r * u));
                jx.push(x.dot(&(q * x)) + kx.dot(&(r * &kx)));
                je.push(e.dot(&(r * e)));
            }
            let xt = &traj.states[horizon];
            let term = xt.dot(&(q * xt));
            Ok((total + term, jx, je, term))
        })
        .collect::<Result<Vec<_>, LtiError>>()?;

    let n = n_real as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut j_x = vec![0.0; horizon - 1];
    let mut j_e = vec![0.0; horizon - 1];
    let mut j_terminal = 0.0;
    for (_, jx, je, term) in &samples {
        for t in 0..horizon - 1 {
            j_x[t] += jx[t] / n;
            j_e[t] += je[t] / n;
        }
        j_terminal += term / n;
    }
    Ok(CostReport {
        j_total: mean,
        j_x,
        j_e,
        j_terminal,
        stderr: Some((var / n).sqrt()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::example_system_one;
    use approx::assert_relative_eq;

    fn scalar_sys(a: f64, b: f64, s2: f64) -> LtiSystem {
        LtiSystem::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, b),
            s2,
        )
        .unwrap()
    }

    #[test]
    fn covariance_pure_noise() {
        let sys = LtiSystem::new(Matrix::zeros(2, 2), Matrix::zeros(2, 1), 0.3).unwrap();
        let cov = propagate_covariance(&sys, &Policy::zero(2, 1, 5)).unwrap();
        assert_eq!(cov.horizon(), 6);
        for p in cov.as_slice() {
            assert_relative_eq!(p.as_matrix(), &(Matrix::identity(2, 2) * 0.3), epsilon = 1e-15);
        }
    }

    #[test]
    fn covariance_random_walk() {
        let sys = scalar_sys(1.0, 0.0, 1.0);
        let cov = propagate_covariance(&sys, &Policy::zero(1, 1, 3)).unwrap();
        let diag: Vec<f64> = cov.as_slice().iter().map(|p| p[(0, 0)]).collect();
        assert_eq!(diag, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn covariance_excitation_impulse() {
        let sys = example_system_one(0.0);
        let mut policy = Policy::zero(3, 2, 4);
        policy.set_excitation(1, SymMatrix::identity(2)).unwrap();
        let cov = propagate_covariance(&sys, &policy).unwrap();
        let bbt = &sys.b * sys.b.transpose();
        assert_relative_eq!(cov.cov(2).as_matrix(), &bbt, epsilon = 1e-15);
        let abbta = &sys.a * &bbt * sys.a.transpose();
        assert_relative_eq!(cov.cov(3).as_matrix(), &abbta, epsilon = 1e-15);
    }

    #[test]
    fn covariance_cost_pure_noise_total() {
        let sys = LtiSystem::new(Matrix::zeros(3, 3), Matrix::zeros(3, 2), 0.5).unwrap();
        let cm = CostMatrices::new(SymMatrix::identity(3), SymMatrix::from_diagonal(&[2.0, 7.0]))
            .unwrap();
        let policy = Policy::zero(3, 2, 9);
        let report = evaluate_policy(&sys, &cm, &policy).unwrap();
        // T · σ² · n_x with T = 10
        assert_relative_eq!(report.j_total, 10.0 * 0.5 * 3.0, epsilon = 1e-12);
    }

    #[test]
    fn covariance_cost_decomposition_is_consistent() {
        let sys = example_system_one(0.5);
        let cm = CostMatrices::new(SymMatrix::identity(3), SymMatrix::from_diagonal(&[10.0, 1.0]))
            .unwrap();
        let gains = vec![Matrix::from_element(2, 3, -0.05); 7];
        let mut policy = Policy::feedback_only(gains).unwrap();
        policy.set_excitation(2, SymMatrix::from_diagonal(&[0.3, 0.1])).unwrap();
        let r = evaluate_policy(&sys, &cm, &policy).unwrap();
        let sum = r.j_x.iter().sum::<f64>() + r.j_e.iter().sum::<f64>() + r.j_terminal;
        assert_relative_eq!(r.j_total, sum, max_relative = 1e-12);
        assert_relative_eq!(r.j_e[1], 10.0 * 0.3 + 0.1, epsilon = 1e-12);
    }

    #[test]
    fn covariance_keeps_noise_floor() {
        let sys = example_system_one(0.5);
        let gains = vec![Matrix::from_element(2, 3, 0.3); 12];
        let cov = propagate_covariance(&sys, &Policy::feedback_only(gains).unwrap()).unwrap();
        for p in cov.as_slice() {
            assert!(min_eig(p).unwrap() >= 0.5 - 1e-9);
        }
    }

    #[test]
    fn monte_carlo_noiseless_is_zero() {
        let sys = example_system_one(0.0);
        let cm = CostMatrices::new(SymMatrix::identity(3), SymMatrix::identity(2)).unwrap();
        let r = monte_carlo_cost(&sys, &Policy::zero(3, 2, 9), &cm, 10, &RngStream::new(1, 0))
            .unwrap();
        assert_eq!(r.j_total, 0.0);
        assert_eq!(r.stderr, Some(0.0));
    }

    #[test]
    fn monte_carlo_deterministic_and_close() {
        let sys = example_system_one(0.5);
        let cm = CostMatrices::new(SymMatrix::identity(3), SymMatrix::from_diagonal(&[10.0, 1.0]))
            .unwrap();
        let mut policy = Policy::feedback_only(vec![Matrix::from_element(2, 3, -0.1); 14]).unwrap();
        policy.set_excitation(1, SymMatrix::identity(2)).unwrap();
        let rng = RngStream::new(21, 0);
        let a = monte_carlo_cost(&sys, &policy, &cm, 1000, &rng).unwrap();
        let b = monte_carlo_cost(&sys, &policy, &cm, 1000, &rng).unwrap();
        assert_eq!(a, b);
        let exact = evaluate_policy(&sys, &cm, &policy).unwrap();
        assert!((a.j_total - exact.j_total).abs() <= 4.0 * a.stderr.unwrap());
    }

    #[test]
    fn policy_validation() {
        assert!(Policy::new(vec![], vec![]).is_err());
        let bad = Policy::new(
            vec![Matrix::zeros(1, 2)],
            vec![SymMatrix::from_diagonal(&[-1e-3])],
        );
        assert!(matches!(bad, Err(EvalError::InvalidArgument(_))));
        let boundary = Policy::new(
            vec![Matrix::zeros(1, 2)],
            vec![SymMatrix::from_diagonal(&[-1e-12])],
        );
        assert!(boundary.is_ok());
    }

    #[test]
    fn cost_report_json_field_names() {
        let r = CostReport {
            j_total: 1.0,
            j_x: vec![0.5],
            j_e: vec![0.25],
            j_terminal: 0.25,
            stderr: None,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["j_total", "j_x", "j_e", "stderr"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
