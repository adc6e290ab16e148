//! Discrete-time LTI plant `x_{t+1} = A x_t + B u_t + w_t`, `w_t ~ N(0, σ_w² I)`,
//! with `x_0 = 0`: stepping, closed-loop rollouts and identification data.

use crate::evaluation::Policy;
use crate::linalg::{psd_factor, LinalgError, Matrix, SymMatrix, Vector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Eigenvalues of an excitation covariance down to this (relative) level are
/// clamped to zero before sampling.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance is not positive semidefinite: {0}")]
    NotPsd(LinalgError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    #[serde(with = "crate::linalg::rows")]
    pub a: Matrix,
    #[serde(with = "crate::linalg::rows")]
    pub b: Matrix,
    /// Process-noise variance; the noise covariance is `sigma_w2 · I`.
    pub sigma_w2: f64,
}

impl LtiSystem {
    pub fn new(a: Matrix, b: Matrix, sigma_w2: f64) -> Result<Self, LtiError> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(LtiError::DimensionMismatch(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(LtiError::DimensionMismatch(format!(
                "B must be {}xm with m >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !(sigma_w2 >= 0.0) || !sigma_w2.is_finite() {
            return Err(LtiError::InvalidArgument(format!(
                "sigma_w2 must be finite and >= 0, got {sigma_w2}"
            )));
        }
        Ok(Self { a, b, sigma_w2 })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn with_sigma_w2(&self, sigma_w2: f64) -> Self {
        Self {
            sigma_w2,
            ..self.clone()
        }
    }
}

/// Reproducible random stream: identical `(seed, index)` pairs give
/// bit-identical draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    index: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self { seed, index, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// Independent child stream number `index`, derived only from this
    /// stream's `(seed, index)` and not from its current position.
    pub fn child(&self, index: u64) -> RngStream {
        let derived = splitmix64(self.seed ^ splitmix64(self.index.wrapping_add(0x5DEE_CE66)));
        RngStream::new(derived, index)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| self.standard_normal())
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.standard_normal();
            }
        }
        m
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Samples `N(0, cov)` as `F z` with `F Fᵀ = cov` from a clamped
/// eigendecomposition, so covariances on the PSD boundary are fine.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: Matrix,
    zero: bool,
}

impl GaussianSampler {
    pub fn new(cov: &SymMatrix) -> Result<Self, LtiError> {
        let zero = cov.amax() == 0.0;
        let factor = if zero {
            Matrix::zeros(cov.dim(), cov.dim())
        } else {
            psd_factor(cov, PSD_CLAMP_TOL).map_err(LtiError::NotPsd)?
        };
        Ok(Self { factor, zero })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vector {
        // draws are consumed even for a zero covariance so that the stream
        // position does not depend on the covariance values
        let z = rng.normal_vec(self.factor.ncols());
        if self.zero {
            Vector::zeros(self.dim())
        } else {
            &self.factor * z
        }
    }
}

/// One draw from `N(0, cov)`.
pub fn gaussian_vec(cov: &SymMatrix, rng: &mut RngStream) -> Result<Vector, LtiError> {
    Ok(GaussianSampler::new(cov)?.sample(rng))
}

/// `A x + B u + w`.
pub fn step(sys: &LtiSystem, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector, LtiError> {
    if x.len() != sys.n_x() || w.len() != sys.n_x() || u.len() != sys.n_u() {
        return Err(LtiError::DimensionMismatch(format!(
            "step expects x,w in R^{} and u in R^{}, got x:{} u:{} w:{}",
            sys.n_x(),
            sys.n_u(),
            x.len(),
            u.len(),
            w.len()
        )));
    }
    Ok(&sys.a * x + &sys.b * u + w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0 … x_T`.
    pub states: Vec<Vector>,
    /// `u_0 … u_{T-1}`.
    pub inputs: Vec<Vector>,
    /// Excitation part `e_t` of each input (`u_t = K_t x_t + e_t`).
    pub excitations: Vec<Vector>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }
}

/// Closed-loop rollout over `[0, horizon]` from `x_0 = 0`.
///
/// The policy acts on `t = 1 … horizon-1`; `u_0 = 0`, so `x_1 = w_0` and
/// `E[x_1 x_1ᵀ] = σ_w² I`.
pub fn rollout(
    sys: &LtiSystem,
    policy: &Policy,
    horizon: usize,
    rng: &mut RngStream,
) -> Result<Trajectory, LtiError> {
    if horizon < 1 {
        return Err(LtiError::InvalidArgument("horizon must be >= 1".into()));
    }
    if policy.len() + 1 < horizon {
        return Err(LtiError::DimensionMismatch(format!(
            "policy covers t = 1..{} but the rollout needs t = 1..{}",
            policy.len(),
            horizon - 1
        )));
    }
    if policy.n_x() != sys.n_x() || policy.n_u() != sys.n_u() {
        return Err(LtiError::DimensionMismatch(format!(
            "policy is {}x{} but the system has n_u={}, n_x={}",
            policy.n_u(),
            policy.n_x(),
            sys.n_u(),
            sys.n_x()
        )));
    }
    let samplers = (1..horizon)
        .map(|t| GaussianSampler::new(policy.excitation(t)))
        .collect::<Result<Vec<_>, _>>()?;
    let noise_std = sys.sigma_w2.sqrt();
    rollout_with(sys, horizon, rng, |t, x, rng| {
        if t == 0 {
            (Vector::zeros(sys.n_u()), Vector::zeros(sys.n_u()))
        } else {
            let e = samplers[t - 1].sample(rng);
            (policy.gain(t) * x + &e, e)
        }
    }, noise_std)
}

/// Shared rollout loop; `input(t, x_t, rng)` returns `(u_t, e_t)`.
pub(crate) fn rollout_with<F>(
    sys: &LtiSystem,
    horizon: usize,
    rng: &mut RngStream,
    mut input: F,
    noise_std: f64,
) -> Result<Trajectory, LtiError>
where
    F: FnMut(usize, &Vector, &mut RngStream) -> (Vector, Vector),
{
    let n_x = sys.n_x();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let mut excitations = Vec::with_capacity(horizon);
    let mut x = Vector::zeros(n_x);
    states.push(x.clone());
    for t in 0..horizon {
        let (u, e) = input(t, &x, rng);
        let w = rng.normal_vec(n_x) * noise_std;
        x = step(sys, &x, &u, &w)?;
        inputs.push(u);
        excitations.push(e);
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        inputs,
        excitations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdSample {
    pub x: Vector,
    pub u: Vector,
    pub x_next: Vector,
}

impl IdSample {
    /// Stacked regressor `[x; u]`.
    pub fn regressor(&self) -> Vector {
        let mut phi = Vector::zeros(self.x.len() + self.u.len());
        phi.rows_mut(0, self.x.len()).copy_from(&self.x);
        phi.rows_mut(self.x.len(), self.u.len()).copy_from(&self.u);
        phi
    }
}

/// `(x_t, u_t, x_{t+1})` triples used for least-squares identification.
#[derive(Debug, Clone, PartialEq)]
pub struct IdDataset {
    n_x: usize,
    n_u: usize,
    samples: Vec<IdSample>,
}

impl IdDataset {
    pub fn new(n_x: usize, n_u: usize, samples: Vec<IdSample>) -> Result<Self, LtiError> {
        if samples.is_empty() {
            return Err(LtiError::InvalidArgument("dataset needs at least one sample".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != n_x || s.x_next.len() != n_x || s.u.len() != n_u {
                return Err(LtiError::DimensionMismatch(format!(
                    "sample {i} is inconsistent with n_x={n_x}, n_u={n_u}"
                )));
            }
        }
        Ok(Self { n_x, n_u, samples })
    }

    /// Triples `(x_t, u_t, x_{t+1})` of a single trajectory.
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self, LtiError> {
        Self::from_trajectory_window(traj, 0, traj.horizon())
    }

    /// Triples for `t` in `start..end` of a single trajectory.
    pub fn from_trajectory_window(
        traj: &Trajectory,
        start: usize,
        end: usize,
    ) -> Result<Self, LtiError> {
        if end > traj.horizon() || start >= end {
            return Err(LtiError::InvalidArgument(format!(
                "window {start}..{end} outside trajectory of horizon {}",
                traj.horizon()
            )));
        }
        let samples = (start..end)
            .map(|t| IdSample {
                x: traj.states[t].clone(),
                u: traj.inputs[t].clone(),
                x_next: traj.states[t + 1].clone(),
            })
            .collect();
        Self::new(traj.states[0].len(), traj.inputs[0].len(), samples)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[IdSample] {
        &self.samples
    }

    pub fn extend(&mut self, other: &IdDataset) -> Result<(), LtiError> {
        if other.n_x != self.n_x || other.n_u != self.n_u {
            return Err(LtiError::DimensionMismatch("datasets have different dimensions".into()));
        }
        self.samples.extend(other.samples.iter().cloned());
        Ok(())
    }
}

/// Identification protocol: `n_rollouts` independent rollouts of `rollout_len`
/// states each (from `x_0 = 0`), driven by `u_t ~ N(0, sigma_u2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdProtocol {
    pub n_rollouts: usize,
    pub rollout_len: usize,
    pub sigma_u2: f64,
}

impl Default for IdProtocol {
    fn default() -> Self {
        Self {
            n_rollouts: 100,
            rollout_len: 5,
            sigma_u2: 1.0,
        }
    }
}

/// Collects `n_rollouts · (rollout_len - 1)` triples. Rollout `r` draws from
/// `rng.child(r)`; triples never span two rollouts.
pub fn collect_id_data(
    sys: &LtiSystem,
    sigma_u2: f64,
    n_rollouts: usize,
    rollout_len: usize,
    rng: &RngStream,
) -> Result<IdDataset, LtiError> {
    if n_rollouts < 1 {
        return Err(LtiError::InvalidArgument("n_rollouts must be >= 1".into()));
    }
    if rollout_len < 2 {
        return Err(LtiError::InvalidArgument("rollout length must be >= 2".into()));
    }
    if !(sigma_u2 >= 0.0) {
        return Err(LtiError::InvalidArgument(format!("sigma_u2 must be >= 0, got {sigma_u2}")));
    }
    let sigma_u = sigma_u2.sqrt();
    let noise_std = sys.sigma_w2.sqrt();
    let n_u = sys.n_u();
    let mut samples = Vec::with_capacity(n_rollouts * (rollout_len - 1));
    for r in 0..n_rollouts {
        let mut stream = rng.child(r as u64);
        let traj = rollout_with(sys, rollout_len - 1, &mut stream, |_, _, rng| {
            let u = rng.normal_vec(n_u) * sigma_u;
            (u.clone(), u)
        }, noise_std)?;
        for t in 0..traj.horizon() {
            samples.push(IdSample {
                x: traj.states[t].clone(),
                u: traj.inputs[t].clone(),
                x_next: traj.states[t + 1].clone(),
            });
        }
    }
    IdDataset::new(sys.n_x(), n_u, samples)
}

/// First example plant: lightly coupled, well damped.
pub fn example_system_one(sigma_w2: f64) -> LtiSystem {
    let a = Matrix::from_row_slice(3, 3, &[0.18, 0.1, 0.0, 0.0, 0.18, 0.04, 0.0, -0.04, 0.16]);
    let b = Matrix::from_row_slice(3, 2, &[0.0, 1.0, 0.6, 0.0, 0.0, 0.6]);
    LtiSystem::new(a, b, sigma_w2).expect("valid example system")
}

/// Second example plant: eigenvalues close to the unit circle, weakly controllable
/// slow mode.
pub fn example_system_two(sigma_w2: f64) -> LtiSystem {
    let a = Matrix::from_row_slice(3, 3, &[0.9, 0.5, 0.0, 0.0, 0.9, 0.2, 0.0, -0.2, 0.8]);
    let b = Matrix::from_row_slice(3, 2, &[0.0, 0.1, 0.6, 0.0, 0.0, 0.6]);
    LtiSystem::new(a, b, sigma_w2).expect("valid example system")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Policy;
    use approx::assert_relative_eq;

    fn zero_system(n_x: usize, n_u: usize, sigma_w2: f64) -> LtiSystem {
        LtiSystem::new(Matrix::zeros(n_x, n_x), Matrix::zeros(n_x, n_u), sigma_w2).unwrap()
    }

    #[test]
    fn step_examples() {
        let sys = zero_system(3, 2, 0.0);
        let v = Vector::from_row_slice(&[1.0, -2.0, 3.0]);
        let out = step(&sys, &Vector::zeros(3), &Vector::zeros(2), &v).unwrap();
        assert_eq!(out, v);

        let b = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let sys = LtiSystem::new(Matrix::identity(3, 3), b.clone(), 0.0).unwrap();
        let e1 = Vector::from_row_slice(&[1.0, 0.0, 0.0]);
        let u = Vector::from_row_slice(&[1.0, 0.0]);
        let out = step(&sys, &e1, &u, &Vector::zeros(3)).unwrap();
        assert_eq!(out, &e1 + &b * &u);

        let sys = example_system_one(0.5);
        let e2 = Vector::from_row_slice(&[0.0, 1.0, 0.0]);
        let out = step(&sys, &e2, &Vector::zeros(2), &Vector::zeros(3)).unwrap();
        assert_eq!(out.as_slice(), &[0.1, 0.18, -0.04]);
    }

    #[test]
    fn step_dimension_mismatch() {
        let sys = zero_system(3, 2, 0.0);
        assert!(matches!(
            step(&sys, &Vector::zeros(2), &Vector::zeros(2), &Vector::zeros(3)),
            Err(LtiError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gaussian_zero_and_degenerate() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..10 {
            let v = gaussian_vec(&SymMatrix::zeros(3), &mut rng).unwrap();
            assert_eq!(v, Vector::zeros(3));
        }
        let cov = SymMatrix::from_diagonal(&[4.0, 0.0]);
        for _ in 0..100 {
            let v = gaussian_vec(&cov, &mut rng).unwrap();
            assert_eq!(v[1], 0.0);
        }
    }

    #[test]
    fn gaussian_rejects_indefinite() {
        let mut rng = RngStream::new(1, 0);
        let cov = SymMatrix::from_diagonal(&[1.0, -0.5]);
        assert!(matches!(gaussian_vec(&cov, &mut rng), Err(LtiError::NotPsd(_))));
    }

    #[test]
    fn gaussian_sample_covariance() {
        let mut rng = RngStream::new(3, 0);
        let sampler = GaussianSampler::new(&SymMatrix::identity(2)).unwrap();
        let n = 100_000;
        let mut acc = Matrix::zeros(2, 2);
        for _ in 0..n {
            let v = sampler.sample(&mut rng);
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        assert!((acc - Matrix::identity(2, 2)).amax() < 0.05);
    }

    #[test]
    fn rollout_without_noise_stays_at_origin() {
        let sys = example_system_two(0.0);
        let gains = vec![Matrix::from_element(2, 3, 0.7); 9];
        let policy = Policy::feedback_only(gains).unwrap();
        let traj = rollout(&sys, &policy, 10, &mut RngStream::new(9, 2)).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert!(traj.states.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn rollout_pure_noise_variance() {
        let sys = zero_system(3, 1, 1.0);
        let t = 10_000;
        let policy = Policy::zero(3, 1, t - 1);
        let traj = rollout(&sys, &policy, t, &mut RngStream::new(11, 0)).unwrap();
        let msq: f64 = traj.states[1..].iter().map(|x| x.norm_squared()).sum::<f64>() / t as f64;
        assert!((msq - 3.0).abs() < 0.05 * 3.0, "mean squared state {msq}");
    }

    #[test]
    fn rollout_is_deterministic() {
        let sys = example_system_one(0.5);
        let mut policy = Policy::zero(3, 2, 19);
        for t in 1..=19 {
            policy.set_excitation(t, SymMatrix::identity(2)).unwrap();
        }
        let a = rollout(&sys, &policy, 20, &mut RngStream::new(5, 1)).unwrap();
        let b = rollout(&sys, &policy, 20, &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(a, b);
        let c = rollout(&sys, &policy, 20, &mut RngStream::new(5, 2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn collect_counts() {
        let sys = example_system_one(0.5);
        let rng = RngStream::new(1, 0);
        assert_eq!(collect_id_data(&sys, 1.0, 1, 2, &rng).unwrap().len(), 1);
        assert_eq!(collect_id_data(&sys, 1.0, 100, 5, &rng).unwrap().len(), 400);
        assert!(collect_id_data(&sys, 1.0, 0, 5, &rng).is_err());
        assert!(collect_id_data(&sys, 1.0, 1, 1, &rng).is_err());
    }

    #[test]
    fn collect_noiseless_triples_are_exact() {
        let sys = example_system_two(0.0);
        let data = collect_id_data(&sys, 1.0, 10, 6, &RngStream::new(4, 0)).unwrap();
        for s in data.samples() {
            let pred = &sys.a * &s.x + &sys.b * &s.u;
            assert_relative_eq!(pred, s.x_next.clone(), epsilon = 1e-15);
        }
    }

    #[test]
    fn collect_never_spans_rollouts() {
        let sys = example_system_one(0.5);
        let t_r = 5;
        let data = collect_id_data(&sys, 1.0, 20, t_r, &RngStream::new(8, 0)).unwrap();
        for (i, s) in data.samples().iter().enumerate() {
            if i % (t_r - 1) == 0 {
                // every rollout restarts from the origin
                assert_eq!(s.x.amax(), 0.0);
            } else {
                assert_eq!(s.x, data.samples()[i - 1].x_next);
            }
        }
    }
}
