//! Dense symmetric linear algebra shared by the rest of the crate.
//!
//! Everything here works on small matrices (a few dozen rows at most), so the
//! routines favour robustness over speed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::Deref;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is empty")]
    Empty,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {pivot} failed)")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPositiveSemidefinite { min_eig: f64 },
    #[error("symmetric eigensolver did not converge")]
    ConvergenceFailure,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Dense real symmetric matrix.
///
/// Stored in full. Construction symmetrizes by averaging with the transpose,
/// so the stored entries are exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Checked constructor: rejects matrices whose asymmetry exceeds
    /// [`SYMMETRY_TOL`] relative to their largest entry.
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        check_square(&m)?;
        let scale = m.amax().max(1.0);
        let asym = max_asymmetry(&m);
        if asym > SYMMETRY_TOL * scale {
            return Err(LinalgError::NotSymmetric {
                max_asymmetry: asym,
            });
        }
        Ok(Self::symmetrize(m))
    }

    /// Averages `m` with its transpose without checking the asymmetry.
    pub fn symmetrize(m: Matrix) -> Self {
        assert!(m.is_square() && m.nrows() > 0, "symmetrize needs a square non-empty matrix");
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(Matrix::from_diagonal(&Vector::from_row_slice(d)))
    }

    /// Row-major entries; symmetric input is required (checked).
    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self, LinalgError> {
        if data.len() != n * n {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Self::new(Matrix::from_row_slice(n, n, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(&self.0 * alpha)
    }

    /// `m * self * mᵀ`, which is symmetric by construction.
    pub fn congruence(&self, m: &Matrix) -> Self {
        Self::symmetrize(m * &self.0 * m.transpose())
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> Self {
        Self(&self.0 - &other.0)
    }
}

impl Deref for SymMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        rows::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = rows::deserialize(d)?;
        SymMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

fn check_square(m: &Matrix) -> Result<(), LinalgError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(LinalgError::Empty);
    }
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangularFactor(Matrix);

impl LowerTriangularFactor {
    pub fn l(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// Solves `m x = b` using the factorization.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let y = self
            .0
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        self.0
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `m⁻¹`.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.0.nrows();
        SymMatrix::symmetrize(self.solve(&Matrix::identity(n, n)))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.0.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Cholesky factorization; fails on the first non-positive pivot.
pub fn cholesky(m: &SymMatrix) -> Result<LowerTriangularFactor, LinalgError> {
    let n = m.dim();
    let a = m.as_matrix();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(LowerTriangularFactor(l))
}

/// Eigendecomposition with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vector,
    /// Orthonormal eigenvectors, one per column, matching `values`.
    pub vectors: Matrix,
}

impl SymEig {
    pub fn reconstruct(&self) -> Matrix {
        &self.vectors * Matrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

pub fn sym_eig(m: &SymMatrix) -> Result<SymEig, LinalgError> {
    let n = m.dim();
    let eig = SymmetricEigen::try_new(m.as_matrix().clone(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or(LinalgError::ConvergenceFailure)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { values, vectors })
}

pub fn min_eig(m: &SymMatrix) -> Result<f64, LinalgError> {
    Ok(sym_eig(m)?.values[0])
}

pub fn max_eig(m: &SymMatrix) -> Result<f64, LinalgError> {
    let e = sym_eig(m)?;
    Ok(e.values[e.values.len() - 1])
}

/// Factor `F` with `F·Fᵀ = m` for a PSD matrix, built from the
/// eigendecomposition. Eigenvalues in `[-clamp_tol, 0)` are treated as zero;
/// anything more negative is an error.
pub fn psd_factor(m: &SymMatrix, clamp_tol: f64) -> Result<Matrix, LinalgError> {
    let eig = sym_eig(m)?;
    let scale = m.amax().max(1.0);
    if eig.values[0] < -clamp_tol * scale {
        return Err(LinalgError::NotPositiveSemidefinite {
            min_eig: eig.values[0],
        });
    }
    let mut f = eig.vectors;
    for (j, &lam) in eig.values.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok(f)
}

/// Symmetric PSD square root `V·√Λ·Vᵀ`.
pub fn psd_sqrt(m: &SymMatrix, clamp_tol: f64) -> Result<SymMatrix, LinalgError> {
    let f = psd_factor(m, clamp_tol)?;
    let eig = sym_eig(m)?;
    Ok(SymMatrix::symmetrize(&f * eig.vectors.transpose()))
}

/// Projection onto the PSD cone: negative eigenvalues are set to zero.
pub fn project_psd(m: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let eig = sym_eig(m)?;
    let clamped = eig.values.map(|v| v.max(0.0));
    Ok(SymMatrix::symmetrize(
        &eig.vectors * Matrix::from_diagonal(&clamped) * eig.vectors.transpose(),
    ))
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &Matrix) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Serde adapter storing a matrix as row-major nested arrays.
pub mod rows {
    use super::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, String> {
        let nrows = rows.len();
        if nrows == 0 {
            return Err("matrix has no rows".into());
        }
        let ncols = rows[0].len();
        if ncols == 0 {
            return Err("matrix has no columns".into());
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
            return Err(format!(
                "row {i} has {} entries, expected {ncols}",
                r.len()
            ));
        }
        Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    /// Same encoding for a sequence of matrices.
    pub mod seq {
        use super::{from_rows, to_rows, Matrix};
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(ms: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|r| from_rows(r).map_err(serde::de::Error::custom))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrize(m)
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(l.l(), &Matrix::identity(3, 3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let m = SymMatrix::from_row_slice(2, &[4.0, 2.0, 2.0, 3.0]).unwrap();
        let l = cholesky(&m).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert_relative_eq!(l.l(), &expected, epsilon = 1e-14);
        let rebuilt = l.l() * l.l().transpose();
        assert_relative_eq!(&rebuilt, m.as_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_indefinite_reports_pivot() {
        let m = SymMatrix::from_row_slice(2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(
            cholesky(&m).unwrap_err(),
            LinalgError::NotPositiveDefinite { pivot: 1 }
        );
    }

    #[test]
    fn new_rejects_asymmetric_and_nonsquare() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 1.0]);
        assert!(matches!(SymMatrix::new(m), Err(LinalgError::NotSymmetric { .. })));
        let r = Matrix::zeros(2, 3);
        assert!(matches!(SymMatrix::new(r), Err(LinalgError::NotSquare { .. })));
    }

    #[test]
    fn eig_diagonal_and_swap() {
        let e = sym_eig(&SymMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_relative_eq!(e.values.as_slice(), &[1.0, 2.0, 3.0][..], epsilon = 1e-14);
        assert_relative_eq!(e.vectors[(1, 0)].abs(), 1.0, epsilon = 1e-14);

        let swap = SymMatrix::from_row_slice(2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let e = sym_eig(&swap).unwrap();
        assert_relative_eq!(e.values.as_slice(), &[-1.0, 1.0][..], epsilon = 1e-14);
    }

    #[test]
    fn eig_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_sym(5, &mut rng);
        let e = sym_eig(&m).unwrap();
        let err = (e.reconstruct() - m.as_matrix()).norm();
        assert!(err <= 1e-9 * m.norm().max(1.0), "reconstruction error {err}");
        let vtv = e.vectors.transpose() * &e.vectors;
        assert!((vtv - Matrix::identity(5, 5)).amax() < 1e-9);
        for i in 0..5 {
            let v = e.vectors.column(i);
            let r = m.as_matrix() * v - v * e.values[i];
            assert!(r.amax() < 1e-9);
        }
    }

    #[test]
    fn min_eig_examples() {
        assert_relative_eq!(min_eig(&SymMatrix::identity(4)).unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(min_eig(&SymMatrix::zeros(3)).unwrap(), 0.0);
        // characteristic polynomial (2-λ)² - 1 = 0 → λ ∈ {1, 3}
        let m = SymMatrix::from_row_slice(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        assert_relative_eq!(min_eig(&m).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn psd_factor_clamps_boundary() {
        let m = SymMatrix::from_diagonal(&[4.0, -1e-14]);
        let f = psd_factor(&m, 1e-10).unwrap();
        let rebuilt = &f * f.transpose();
        assert_relative_eq!(rebuilt[(0, 0)], 4.0, epsilon = 1e-12);
        assert_eq!(rebuilt[(1, 1)], 0.0);
        let bad = SymMatrix::from_diagonal(&[1.0, -1e-3]);
        assert!(matches!(
            psd_factor(&bad, 1e-10),
            Err(LinalgError::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let c = 0.3f64.cos() * 0.9;
        let s = 0.3f64.sin() * 0.9;
        let m = Matrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert_relative_eq!(spectral_radius(&m), 0.9, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cholesky_iff_positive_min_eig(seed in any::<u64>(), n in 1usize..8, shift in -1.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = random_sym(n, &mut rng);
            let m = SymMatrix::symmetrize(base.as_matrix() + Matrix::identity(n, n) * shift);
            let lam = min_eig(&m).unwrap();
            prop_assume!(lam.abs() > 1e-8);
            prop_assert_eq!(cholesky(&m).is_ok(), lam > 0.0);
        }

        #[test]
        fn eig_reconstruction_up_to_dim_50(seed in any::<u64>(), n in 1usize..=50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_sym(n, &mut rng);
            let e = sym_eig(&m).unwrap();
            let err = (e.reconstruct() - m.as_matrix()).norm();
            prop_assert!(err <= 1e-9 * m.norm().max(1e-300));
        }
    }
}
