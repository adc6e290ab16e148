//! Finite-horizon LQR for known dynamics via the backward Riccati
//! difference equation. Gains follow the `u_t = K_t x_t` convention, so `K_t`
//! carries the minus sign.

use crate::evaluation::{EvalError, Policy};
use crate::linalg::{cholesky, Matrix, SymMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RiccatiError {
    #[error("R + Bᵀ X B is not positive definite at t = {t}")]
    SingularInnovation { t: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("horizon must be >= 1")]
    EmptyHorizon,
}

/// Value matrices `X_1 … X_T` and gains `K_1 … K_{T-1}`; accessors are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    values: Vec<SymMatrix>,
    #[serde(with = "crate::linalg::rows::seq")]
    gains: Vec<Matrix>,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, t: usize) -> &SymMatrix {
        &self.values[t - 1]
    }

    pub fn gain(&self, t: usize) -> &Matrix {
        &self.gains[t - 1]
    }

    pub fn values(&self) -> &[SymMatrix] {
        &self.values
    }

    pub fn gains(&self) -> &[Matrix] {
        &self.gains
    }

    /// Feedback-only policy `K_1 … K_{T-1}`.
    pub fn policy(&self) -> Result<Policy, EvalError> {
        Policy::feedback_only(self.gains.clone())
    }
}

pub fn drde_solve(
    a: &Matrix,
    b: &Matrix,
    q: &SymMatrix,
    r: &SymMatrix,
    horizon: usize,
) -> Result<RiccatiSolution, RiccatiError> {
    if horizon < 1 {
        return Err(RiccatiError::EmptyHorizon);
    }
    let n_x = a.nrows();
    if !a.is_square() || b.nrows() != n_x || q.dim() != n_x || r.dim() != b.ncols() {
        return Err(RiccatiError::DimensionMismatch(format!(
            "A {:?}, B {:?}, Q {}, R {}",
            a.shape(),
            b.shape(),
            q.dim(),
            r.dim()
        )));
    }
    let mut values = vec![q.clone(); horizon];
    let mut gains = vec![Matrix::zeros(b.ncols(), n_x); horizon - 1];
    for t in (1..horizon).rev() {
        let x_next = values[t].as_matrix();
        let xb = x_next * b;
        let innovation = SymMatrix::symmetrize(r.as_matrix() + b.transpose() * &xb);
        let chol = cholesky(&innovation).map_err(|_| RiccatiError::SingularInnovation { t })?;
        let bxa = xb.transpose() * a;
        let k = -chol.solve(&bxa);
        // X_t = Q + Aᵀ X A + Aᵀ X B K
        let x_t = q.as_matrix() + a.transpose() * x_next * a + bxa.transpose() * &k;
        gains[t - 1] = k;
        values[t - 1] = SymMatrix::symmetrize(x_t);
    }
    Ok(RiccatiSolution { values, gains })
}

/// Optimal expected cost `σ_w² Σ_{t=1}^{T} tr X_t` for `x_0 = 0`, `u_0 = 0`.
///
/// The `t = 1` term accounts for `x_1 = w_0`; the remaining terms are the
/// disturbances `w_1 … w_{T-1}` seen through `X_2 … X_T`.
pub fn drde_cost(sol: &RiccatiSolution, sigma_w2: f64) -> f64 {
    sigma_w2 * sol.values.iter().map(|x| x.trace()).sum::<f64>()
}
