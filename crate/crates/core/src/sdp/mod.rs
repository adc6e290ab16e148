//! Block-structured semidefinite programming.
//!
//! Problems are assembled with [`SdpProblem`] from affine matrix expressions
//! and lowered to a self-contained [`StandardForm`]
//!
//! ```text
//! minimize    cᵀx
//! subject to  F₀ᵇ + Σᵢ xᵢ Fᵢᵇ ⪰ 0   for every block b
//!             E x = h
//! ```
//!
//! which any [`ConicBackend`] can solve. The bundled backend is a
//! homogeneous self-dual interior-point method with Nesterov–Todd scaling.

mod expr;
mod kkt;
mod problem;
mod solver;

pub use expr::{AffineMatrix, LinExpr};
pub use problem::{BlockHandle, MatrixVar, SdpProblem, StandardBlock, StandardForm};
pub use solver::InteriorPoint;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SdpError {
    #[error("expression is not affine: product of two decision variables")]
    NonAffine,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("LMI block is not symmetric")]
    NotSymmetric,
    #[error("problem has no constraint blocks")]
    NoBlocks,
    #[error("numerical breakdown at iteration {iteration}: {reason}")]
    NumericalBreakdown { iteration: usize, reason: String },
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Relative primal/dual residual tolerance.
    pub feas_tol: f64,
    /// Relative duality-gap tolerance.
    pub gap_tol: f64,
    pub max_iter: usize,
    /// Certificate tolerance for infeasibility/unboundedness.
    pub infeas_tol: f64,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-7,
            gap_tol: 1e-7,
            max_iter: 200,
            infeas_tol: 1e-8,
            verbose: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SdpError> {
        let ok = |v: f64| v > 0.0 && v < 1.0;
        if !ok(self.feas_tol) || !ok(self.gap_tol) || !ok(self.infeas_tol) {
            return Err(SdpError::InvalidSettings("tolerances must lie in (0, 1)".into()));
        }
        if self.max_iter == 0 {
            return Err(SdpError::InvalidSettings("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Primal point (the certificate direction for `Unbounded`).
    pub x: Vec<f64>,
    /// `cᵀx` plus the objective constant.
    pub objective_value: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// `(primal − dual) / (1 + |primal| + |dual|)`.
    pub duality_gap: f64,
    /// Largest relative block or equality violation at `x`.
    pub max_constraint_violation: f64,
    pub iterations: usize,
    /// Dual matrices per block (the certificate for `Infeasible`).
    #[serde(skip)]
    pub dual_blocks: Vec<crate::linalg::Matrix>,
    pub dual_eq: Vec<f64>,
}

/// Anything that can solve a [`StandardForm`].
pub trait ConicBackend {
    fn solve(&self, form: &StandardForm, settings: &SolverSettings) -> Result<SdpSolution, SdpError>;
}
