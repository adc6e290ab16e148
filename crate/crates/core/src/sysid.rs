//! Coarse identification: least-squares estimates `(Â, B̂)` and an
//! ellipsoidal confidence region
//!
//! `Ω = { (A, B) : Xᵀ D X ⪯ I }`, `X = [(Â − A)ᵀ; (B̂ − B)ᵀ]`,
//!
//! with `D = (1 / (c_χ σ_w²)) Σ_t φ_t φ_tᵀ`, `φ_t = [x_t; u_t]` and `c_χ` the
//! upper `δ` quantile of a χ² distribution with `n_x² + n_x n_u` degrees of
//! freedom.

use crate::linalg::{cholesky, max_eig, min_eig, LinalgError, Matrix, SymMatrix};
use crate::lti::{collect_id_data, IdDataset, IdProtocol, LtiError, LtiSystem, RngStream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance of the membership test `min_eig(I − XᵀDX) ≥ −tol`.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SysidError {
    #[error("regressors are rank deficient: rank {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("uncertainty matrix D is singular; the boundary is unbounded")]
    DSingular,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Lti(#[from] LtiError),
}

/// Least-squares estimate of `[A B]` from `x_{t+1} ≈ A x_t + B u_t`.
pub fn least_squares_fit(data: &IdDataset) -> Result<(Matrix, Matrix), SysidError> {
    let n_x = data.n_x();
    let n_u = data.n_u();
    let p = n_x + n_u;
    let n = data.len();
    if n < p {
        return Err(SysidError::RankDeficient {
            rank: n,
            needed: p,
        });
    }
    let mut phi = Matrix::zeros(n, p);
    let mut y = Matrix::zeros(n, n_x);
    for (i, s) in data.samples().iter().enumerate() {
        phi.row_mut(i).copy_from(&s.regressor().transpose());
        y.row_mut(i).copy_from(&s.x_next.transpose());
    }
    let svd = phi.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * n.max(p) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if smax == 0.0 || rank < p {
        return Err(SysidError::RankDeficient { rank, needed: p });
    }
    let theta = svd
        .solve(&y, tol)
        .map_err(|e| SysidError::DomainError(e.to_string()))?;
    let a_hat = theta.rows(0, n_x).transpose();
    let b_hat = theta.rows(n_x, n_u).transpose();
    Ok((a_hat, b_hat))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x) = Γ(a, x) / Γ(a)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        1.0 - sum * log_prefactor.exp()
    } else {
        // modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        log_prefactor.exp() * h
    }
}

/// `c` with `P(χ²_dof > c) = delta`.
pub fn chi2_quantile(dof: usize, delta: f64) -> Result<f64, SysidError> {
    if dof == 0 {
        return Err(SysidError::DomainError("dof must be >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SysidError::DomainError(format!("delta must be in (0,1), got {delta}")));
    }
    let k = dof as f64;
    let tail = |c: f64| gamma_q(0.5 * k, 0.5 * c);
    let mut lo = 0.0;
    let mut hi = k.max(1.0);
    while tail(hi) > delta {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Degrees of freedom of the joint estimate of `[A B]`.
pub fn chi2_dof(n_x: usize, n_u: usize) -> usize {
    n_x * n_x + n_x * n_u
}

/// `D = (1 / (c_χ σ_w²)) Σ φ_t φ_tᵀ` over the dataset.
pub fn uncertainty_matrix(
    data: &IdDataset,
    sigma_w2: f64,
    delta: f64,
) -> Result<SymMatrix, SysidError> {
    if !(sigma_w2 > 0.0) {
        return Err(SysidError::DomainError(format!("sigma_w2 must be > 0, got {sigma_w2}")));
    }
    let c_chi = chi2_quantile(chi2_dof(data.n_x(), data.n_u()), delta)?;
    let p = data.n_x() + data.n_u();
    let mut gram = Matrix::zeros(p, p);
    for s in data.samples() {
        let phi = s.regressor();
        gram.ger(1.0, &phi, &phi, 1.0);
    }
    Ok(SymMatrix::symmetrize(gram / (c_chi * sigma_w2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyModel {
    #[serde(with = "crate::linalg::rows")]
    pub a_hat: Matrix,
    #[serde(with = "crate::linalg::rows")]
    pub b_hat: Matrix,
    pub d: SymMatrix,
    pub delta: f64,
}

impl UncertaintyModel {
    pub fn new(a_hat: Matrix, b_hat: Matrix, d: SymMatrix, delta: f64) -> Result<Self, SysidError> {
        let n_x = a_hat.nrows();
        if !a_hat.is_square() || b_hat.nrows() != n_x || d.dim() != n_x + b_hat.ncols() {
            return Err(SysidError::DimensionMismatch(format!(
                "A_hat {:?}, B_hat {:?}, D {}x{}",
                a_hat.shape(),
                b_hat.shape(),
                d.dim(),
                d.dim()
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(SysidError::DomainError(format!("delta must be in (0,1), got {delta}")));
        }
        let lam = min_eig(&d)?;
        if lam < -1e-9 * d.amax().max(1.0) {
            return Err(SysidError::Linalg(LinalgError::NotPositiveSemidefinite { min_eig: lam }));
        }
        Ok(Self {
            a_hat,
            b_hat,
            d,
            delta,
        })
    }

    pub fn n_x(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b_hat.ncols()
    }

    /// Nominal plant `(Â, B̂)` with the given noise level.
    pub fn nominal_system(&self, sigma_w2: f64) -> Result<LtiSystem, SysidError> {
        Ok(LtiSystem::new(self.a_hat.clone(), self.b_hat.clone(), sigma_w2)?)
    }

    /// Deviation `X = [(Â − A)ᵀ; (B̂ − B)ᵀ]`.
    pub fn deviation(&self, a: &Matrix, b: &Matrix) -> Result<Matrix, SysidError> {
        if a.shape() != self.a_hat.shape() || b.shape() != self.b_hat.shape() {
            return Err(SysidError::DimensionMismatch(format!(
                "candidate (A, B) has shapes {:?}, {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let mut x = Matrix::zeros(n_x + n_u, n_x);
        x.rows_mut(0, n_x).copy_from(&(&self.a_hat - a).transpose());
        x.rows_mut(n_x, n_u).copy_from(&(&self.b_hat - b).transpose());
        Ok(x)
    }
}

/// `min_eig(I − XᵀDX) ≥ −1e-9`.
pub fn ellipsoid_contains(
    model: &UncertaintyModel,
    a: &Matrix,
    b: &Matrix,
) -> Result<bool, SysidError> {
    Ok(ellipsoid_margin(model, a, b)? >= -MEMBERSHIP_TOL)
}

/// `min_eig(I − XᵀDX)`; zero on the boundary of `Ω`.
pub fn ellipsoid_margin(model: &UncertaintyModel, a: &Matrix, b: &Matrix) -> Result<f64, SysidError> {
    let x = model.deviation(a, b)?;
    let n_x = model.n_x();
    let m = Matrix::identity(n_x, n_x) - x.transpose() * model.d.as_matrix() * &x;
    Ok(min_eig(&SymMatrix::symmetrize(m))?)
}

/// A plant on the boundary of `Ω` in a random direction.
pub fn boundary_sample(
    model: &UncertaintyModel,
    rng: &mut RngStream,
) -> Result<(Matrix, Matrix), SysidError> {
    cholesky(&model.d).map_err(|_| SysidError::DSingular)?;
    let (n_x, n_u) = (model.n_x(), model.n_u());
    let x0 = rng.normal_matrix(n_x + n_u, n_x);
    let top = max_eig(&SymMatrix::symmetrize(
        x0.transpose() * model.d.as_matrix() * &x0,
    ))?;
    let x = x0 / top.sqrt();
    let a = &model.a_hat - x.rows(0, n_x).transpose();
    let b = &model.b_hat - x.rows(n_x, n_u).transpose();
    Ok((a, b))
}

/// Collects identification data with `protocol`, fits `(Â, B̂)` and builds `D`.
pub fn coarse_id(
    sys: &LtiSystem,
    protocol: &IdProtocol,
    delta: f64,
    rng: &RngStream,
) -> Result<(IdDataset, UncertaintyModel), SysidError> {
    let data = collect_id_data(
        sys,
        protocol.sigma_u2,
        protocol.n_rollouts,
        protocol.rollout_len,
        rng,
    )?;
    let model = fit_model(&data, sys.sigma_w2, delta)?;
    Ok((data, model))
}

/// Least-squares fit plus uncertainty matrix for an existing dataset.
pub fn fit_model(data: &IdDataset, sigma_w2: f64, delta: f64) -> Result<UncertaintyModel, SysidError> {
    let (a_hat, b_hat) = least_squares_fit(data)?;
    let d = uncertainty_matrix(data, sigma_w2, delta)?;
    UncertaintyModel::new(a_hat, b_hat, d, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{example_system_one, example_system_two, IdSample};
    use crate::linalg::Vector;
    use approx::assert_relative_eq;

    #[test]
    fn chi2_examples() {
        assert_relative_eq!(
            chi2_quantile(2, 0.05).unwrap(),
            -2.0 * 0.05f64.ln(),
            epsilon = 1e-9
        );
        assert!((chi2_quantile(15, 0.05).unwrap() - 24.9958).abs() < 1e-3);
        assert!((chi2_quantile(1, 0.3173).unwrap() - 1.0).abs() < 1e-3);
        assert!(matches!(chi2_quantile(3, 0.0), Err(SysidError::DomainError(_))));
        assert!(matches!(chi2_quantile(3, 1.0), Err(SysidError::DomainError(_))));
    }

    #[test]
    fn gamma_q_closed_forms() {
        // Q(1, x) = exp(-x)
        for &x in &[0.1, 1.0, 3.0, 20.0] {
            assert_relative_eq!(gamma_q(1.0, x), (-x).exp(), max_relative = 1e-12);
        }
        // Q(2, x) = (1 + x) exp(-x)
        for &x in &[0.5, 2.5, 9.0] {
            assert_relative_eq!(gamma_q(2.0, x), (1.0 + x) * (-x).exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn least_squares_exact_on_noiseless_data() {
        let sys = example_system_two(0.0);
        let data = collect_id_data(&sys, 1.0, 10, 5, &RngStream::new(2, 0)).unwrap();
        let (a, b) = least_squares_fit(&data).unwrap();
        assert_relative_eq!(a, sys.a, epsilon = 1e-8);
        assert_relative_eq!(b, sys.b, epsilon = 1e-8);
    }

    #[test]
    fn least_squares_rank_deficient() {
        let sys = example_system_one(0.5);
        let data = collect_id_data(&sys, 1.0, 1, 4, &RngStream::new(2, 0)).unwrap();
        assert!(matches!(least_squares_fit(&data), Err(SysidError::RankDeficient { .. })));
        // plenty of samples, but u never moves
        let samples = (0..20)
            .map(|i| IdSample {
                x: Vector::from_row_slice(&[i as f64]),
                u: Vector::zeros(1),
                x_next: Vector::from_row_slice(&[0.5 * i as f64]),
            })
            .collect();
        let data = IdDataset::new(1, 1, samples).unwrap();
        assert!(matches!(least_squares_fit(&data), Err(SysidError::RankDeficient { .. })));
    }

    fn one_sample(x: f64, u: f64) -> IdDataset {
        IdDataset::new(
            1,
            1,
            vec![IdSample {
                x: Vector::from_row_slice(&[x]),
                u: Vector::from_row_slice(&[u]),
                x_next: Vector::zeros(1),
            }],
        )
        .unwrap()
    }

    #[test]
    fn uncertainty_matrix_examples() {
        let d = uncertainty_matrix(&one_sample(1.0, 0.0), 1.0, 0.05).unwrap();
        let c = chi2_quantile(2, 0.05).unwrap();
        assert_relative_eq!(d.as_matrix(), &Matrix::from_row_slice(2, 2, &[1.0 / c, 0.0, 0.0, 0.0]));

        let sys = example_system_one(0.5);
        let mut data = collect_id_data(&sys, 0.0, 5, 5, &RngStream::new(3, 0)).unwrap();
        let d1 = uncertainty_matrix(&data, 0.5, 0.05).unwrap();
        assert_eq!(d1.as_matrix().view((3, 3), (2, 2)).amax(), 0.0);

        let copy = data.clone();
        data.extend(&copy).unwrap();
        let d2 = uncertainty_matrix(&data, 0.5, 0.05).unwrap();
        assert_relative_eq!(d2.as_matrix(), &(d1.as_matrix() * 2.0), max_relative = 1e-12);
    }

    fn scalar_model(d: f64) -> UncertaintyModel {
        UncertaintyModel::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            SymMatrix::from_diagonal(&[d, d]),
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn membership_examples() {
        let m = scalar_model(4.0);
        let one = Matrix::from_element(1, 1, 1.0);
        assert!(ellipsoid_contains(&m, &one, &one).unwrap());
        assert!(!ellipsoid_contains(&m, &Matrix::from_element(1, 1, 1.6), &one).unwrap());
        let m0 = scalar_model(0.0);
        assert!(ellipsoid_contains(&m0, &Matrix::from_element(1, 1, 100.0), &one).unwrap());
    }

    #[test]
    fn boundary_samples_lie_on_boundary() {
        let sys = example_system_one(0.5);
        let (_, model) = coarse_id(&sys, &IdProtocol::default(), 0.05, &RngStream::new(4, 0)).unwrap();
        let mut rng = RngStream::new(5, 0);
        let (a1, b1) = boundary_sample(&model, &mut rng).unwrap();
        let (a2, _) = boundary_sample(&model, &mut rng).unwrap();
        assert_ne!(a1, a2);
        assert!(ellipsoid_margin(&model, &a1, &b1).unwrap().abs() < 1e-8);

        let iso = scalar_model(9.0);
        let (a, b) = boundary_sample(&iso, &mut rng).unwrap();
        let x = iso.deviation(&a, &b).unwrap();
        assert_relative_eq!(x.norm(), 1.0 / 3.0, epsilon = 1e-12);

        assert!(matches!(boundary_sample(&scalar_model(0.0), &mut rng), Err(SysidError::DSingular)));
    }
}
