use duallqr::evaluation::{evaluate_policy, CostMatrices, Policy};
use duallqr::linalg::{min_eig, Matrix, SymMatrix};
use duallqr::lti::{collect_id_data, example_system_one, IdProtocol, LtiSystem, RngStream};
use duallqr::riccati::{drde_cost, drde_solve};
use duallqr::sdp::{AffineMatrix, LinExpr, SdpProblem, SolveStatus, SolverSettings};
use duallqr::synthesis::{
    information_gap, synthesize_nominal, synthesize_robust, SynthesisSpec, VariableTrajectories,
};
use duallqr::sysid::{
    chi2_quantile, coarse_id, ellipsoid_contains, uncertainty_matrix, UncertaintyModel,
};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn spd(n: usize, rng: &mut RngStream, floor: f64) -> SymMatrix {
    let l = rng.normal_matrix(n, n);
    SymMatrix::symmetrize(&l * l.transpose() / n as f64 + Matrix::identity(n, n) * floor)
}

#[test]
fn confidence_region_covers_truth() {
    let sys = example_system_one(0.5);
    let protocol = IdProtocol::default();
    let hits = (0..200u64)
        .filter(|&i| {
            let (_, m) = coarse_id(&sys, &protocol, 0.05, &RngStream::new(7000 + i, 0)).unwrap();
            ellipsoid_contains(&m, &sys.a, &sys.b).unwrap()
        })
        .count();
    assert!(hits >= 180, "truth inside the region in {hits}/200 datasets");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chi2_matches_reference(dof in 1usize..60, delta in 0.001f64..0.5) {
        let q = chi2_quantile(dof, delta).unwrap();
        let oracle = ChiSquared::new(dof as f64).unwrap().inverse_cdf(1.0 - delta);
        prop_assert!((q - oracle).abs() <= 1e-6 * oracle.max(1.0), "{q} vs {oracle}");
    }

    #[test]
    fn chi2_monotone(dof in 1usize..40, d1 in 0.01f64..0.3, gap in 0.01f64..0.3) {
        let d2 = d1 + gap;
        prop_assert!(chi2_quantile(dof, d1).unwrap() > chi2_quantile(dof, d2).unwrap());
        prop_assert!(chi2_quantile(dof + 1, d1).unwrap() > chi2_quantile(dof, d1).unwrap());
    }

    #[test]
    fn more_data_shrinks_the_region(seed in 0u64..1000, extra in 1usize..20) {
        let sys = example_system_one(0.5);
        let rng = RngStream::new(seed, 0);
        let base = collect_id_data(&sys, 1.0, 10, 5, &rng).unwrap();
        let mut more = base.clone();
        more.extend(&collect_id_data(&sys, 1.0, extra, 5, &rng.child(99)).unwrap()).unwrap();
        let d0 = uncertainty_matrix(&base, 0.5, 0.05).unwrap();
        let d1 = uncertainty_matrix(&more, 0.5, 0.05).unwrap();
        prop_assert!(min_eig(&d1.sub(&d0)).unwrap() >= -1e-9 * d1.trace());
    }

    #[test]
    fn riccati_beats_random_gains(seed in 0u64..500, horizon in 2usize..15) {
        let mut rng = RngStream::new(seed, 3);
        let sys = LtiSystem::new(rng.normal_matrix(3, 3) * 0.5, rng.normal_matrix(3, 2), 0.3).unwrap();
        let cm = CostMatrices::new(spd(3, &mut rng, 0.1), spd(2, &mut rng, 0.1)).unwrap();
        let sol = drde_solve(&sys.a, &sys.b, cm.q(), cm.r(), horizon).unwrap();
        let opt = drde_cost(&sol, sys.sigma_w2);
        let gains: Vec<Matrix> = sol.gains().iter().map(|k| k + rng.normal_matrix(2, 3) * 0.2).collect();
        let other = evaluate_policy(&sys, &cm, &Policy::feedback_only(gains).unwrap()).unwrap().j_total;
        prop_assert!(opt <= other * (1.0 + 1e-12), "{opt} > {other}");
    }

    #[test]
    fn information_bound_is_valid(seed in 0u64..1000, steps in 1usize..8) {
        let mut rng = RngStream::new(seed, 4);
        let (n_x, n_u) = (3, 2);
        let p: Vec<SymMatrix> = (0..=steps).map(|_| spd(n_x, &mut rng, 0.05)).collect();
        let z: Vec<Matrix> = (0..steps).map(|_| rng.normal_matrix(n_x, n_u)).collect();
        let s: Vec<SymMatrix> = (0..steps).map(|_| spd(n_u, &mut rng, 0.0)).collect();
        let k_bar: Vec<Matrix> = (0..steps).map(|_| rng.normal_matrix(n_u, n_x)).collect();
        let traj = VariableTrajectories { y: vec![], p, z, s, multipliers: vec![] };
        let model = UncertaintyModel::new(
            Matrix::zeros(n_x, n_x),
            Matrix::zeros(n_x, n_u),
            SymMatrix::identity(n_x + n_u),
            0.05,
        )
        .unwrap();
        let gap = information_gap(&traj, &k_bar, &model, 0.5).unwrap();
        prop_assert!(gap >= -1e-9, "D - D_hat has eigenvalue {gap}");
    }
}

/// minimize tr(C X) s.t. tr X = 1, X ⪰ 0, i.e. λ_min(C).
fn min_eig_sdp(c: &Matrix, scale: f64) -> duallqr::sdp::SdpSolution {
    let n = c.nrows();
    let mut p = SdpProblem::new();
    let x = p.add_matrix_var(n, true);
    let e = x.expr();
    let mut obj = LinExpr::constant(0.0);
    let mut tr = LinExpr::constant(-1.0);
    for i in 0..n {
        for j in 0..n {
            obj.axpy(scale * c[(i, j)], e.get(i, j));
        }
        tr.axpy(1.0, e.get(i, i));
    }
    p.add_lmi_block(&e).unwrap();
    p.add_equality(&tr).unwrap();
    p.minimize(&obj).unwrap();
    p.solve(&SolverSettings::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sdp_scale_invariance_and_weak_duality(seed in 0u64..1000, n in 2usize..6, scale in 0.01f64..100.0) {
        let mut rng = RngStream::new(seed, 5);
        let a = rng.normal_matrix(n, n);
        let c = (&a + a.transpose()) * 0.5;
        let base = min_eig_sdp(&c, 1.0);
        let scaled = min_eig_sdp(&c, scale);
        prop_assert_eq!(base.status, SolveStatus::Optimal);
        prop_assert_eq!(scaled.status, SolveStatus::Optimal);
        let lam = min_eig(&SymMatrix::symmetrize(c.clone())).unwrap();
        prop_assert!((base.objective_value - lam).abs() <= 1e-6 * (1.0 + lam.abs()));
        prop_assert!((scaled.objective_value - scale * lam).abs() <= 1e-6 * (1.0 + scale * lam.abs()));
        let tol = 1e-6 * (1.0 + base.primal_objective.abs());
        prop_assert!(base.primal_objective >= base.dual_objective - tol);
    }

    #[test]
    fn max_eig_block_scaling(seed in 0u64..1000, scale in 0.1f64..10.0) {
        // scaling an LMI block leaves the feasible set unchanged
        let mut rng = RngStream::new(seed, 6);
        let a = rng.normal_matrix(4, 4);
        let m = (&a + a.transpose()) * 0.5;
        let solve = |alpha: f64| {
            let mut p = SdpProblem::new();
            let t = p.add_scalar_var();
            let block = AffineMatrix::scaled_identity(&t, 4).sub(&AffineMatrix::constant(&m)).unwrap();
            p.add_lmi_block(&block.scale(alpha)).unwrap();
            p.minimize(&t).unwrap();
            p.solve(&SolverSettings::default()).unwrap().x[0]
        };
        prop_assert!((solve(1.0) - solve(scale)).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn robust_never_beats_nominal(seed in 0u64..1000) {
        let sys = example_system_one(0.5);
        let protocol = IdProtocol { n_rollouts: 30, rollout_len: 5, sigma_u2: 1.0 };
        let (_, model) = coarse_id(&sys, &protocol, 0.05, &RngStream::new(seed, 8)).unwrap();
        let cm = CostMatrices::new(SymMatrix::identity(3), SymMatrix::from_diagonal(&[10.0, 1.0])).unwrap();
        let spec = SynthesisSpec::new(model, cm, 0.5, 12);
        let nom = synthesize_nominal(&spec).unwrap();
        let rob = synthesize_robust(&spec).unwrap();
        prop_assert!(nom.j_wc <= rob.j_wc * (1.0 + 1e-7), "{} > {}", nom.j_wc, rob.j_wc);
    }
}
