mod common;

use common::*;
use dualgn_core::cg::{cg_run, cg_solve, projected_cg_solve_observed, FnOperator};
use dualgn_core::directions::{
    batch_gradient, gn_direction, primal_objective, dual_objective, dual_gn_direction, SolvePath,
    SubproblemSpec,
};
use dualgn_core::linop::{adjoint_dot_test, finite_diff_jvp};
use dualgn_core::losses::BatchLoss;
use dualgn_core::{make_jacobian_operator, Batch, LossKind, ModelSpec, OutputBlock};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kind_strategy() -> impl Strategy<Value = LossKind> {
    prop_oneof![Just(LossKind::Squared), Just(LossKind::Logistic)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cg_iterates_and_directions_stay_positive(seed in any::<u64>(), n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_spd(&mut rng, n, 1e-2);
        let c = random_vec(&mut rng, n);
        let mut op = FnOperator::new(n, matvec(&q));
        let mut worst = f64::INFINITY;
        cg_run(&mut op, &c, &vec![0.0; n], n, 0.0, &mut |_, x| worst = worst.min(dot(x, &c))).unwrap();
        prop_assert!(worst >= -1e-12);
    }

    #[test]
    fn cg_terminates_within_dimension(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_spd(&mut rng, n, 0.5);
        let c = random_vec(&mut rng, n);
        let (x, rep) = cg_solve(matvec(&q), &c, &vec![0.0; n], n, 0.0).unwrap();
        let r = DVector::from_column_slice(&c) - &q * DVector::from_column_slice(&x);
        prop_assert!(r.norm() <= 1e-10 * (1.0 + norm(&c)), "residual {}", r.norm());
        prop_assert!(rep.iterations <= n);
        prop_assert_eq!(rep.residual_norms.len(), rep.iterations + 1);
    }

    #[test]
    fn projected_cg_feasible_and_matches_kkt(seed in any::<u64>(), k in 2usize..5, blocks in 1usize..4, precondition in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = k * blocks;
        let q = random_spd(&mut rng, n, 0.1);
        let c = random_vec(&mut rng, n);
        let project = zero_sum_blocks(k);
        let pmat = DMatrix::from_fn(n, n, |i, j| if i / k == j / k { f64::from(u8::from(i == j)) - 1.0 / k as f64 } else { 0.0 });
        let s: Vec<f64> = random_vec(&mut rng, n).iter().map(|v| 1.1 + v).collect();
        let mut infeasible: f64 = 0.0;
        let (x, _) = projected_cg_solve_observed(matvec(&q), &c, &project, 3 * n, 1e-14, precondition.then_some(&s[..]), &mut |_, x| {
            let px = &pmat * DVector::from_column_slice(x);
            infeasible = infeasible.max((DVector::from_column_slice(x) - px).amax());
        }).unwrap();
        prop_assert!(infeasible <= 1e-10);
        prop_assert!(rel_err(&x, &dense_kkt(&q, &c, &pmat)) <= 1e-8);
    }

    #[test]
    fn model_jacobians_pass_adjoint_and_fd(seed in any::<u64>(), hidden in 1usize..6, m in 1usize..5) {
        let inst = Instance::mlp(seed, &[2, hidden, 3], m, LossKind::Logistic);
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        prop_assert!(adjoint_dot_test(&jac, seed, 2).unwrap() <= 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_vec(&mut rng, jac.dims().p);
        let fd = finite_diff_jvp(&inst.model, &inst.params, &inst.batch, &u, 1e-5).unwrap();
        prop_assert!(rel_err(fd.as_slice(), jac.apply(&u).unwrap().as_slice()) <= 1e-5);
    }

    #[test]
    fn every_prefix_is_a_descent_direction(seed in any::<u64>(), kind in kind_strategy(), tau in 1usize..9, log_gamma in -4i32..2, dual in any::<bool>()) {
        let inst = Instance::mlp(seed, &[3, 4, 3], 1 + (seed % 6) as usize, kind);
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        let loss = BatchLoss::new(kind, &inst.batch.targets).unwrap();
        let f = inst.outputs();
        let grad = batch_gradient(&jac, &loss, &f).unwrap();
        let path = if dual { SolvePath::Dual } else { SolvePath::Primal };
        let res = gn_direction(&jac, &loss, &f, &SubproblemSpec::new(10f64.powi(log_gamma), tau, path).unwrap()).unwrap();
        let scale = 1.0 + norm(&res.d) * norm(&grad);
        prop_assert!(res.descent_inner_product >= -1e-10 * scale);
        prop_assert!(dot(&res.d, &grad) >= -1e-10 * scale);
    }

    #[test]
    fn logistic_dual_iterates_stay_feasible(seed in any::<u64>(), m in 1usize..6, tau in 1usize..16) {
        let inst = Instance::mlp(seed, &[3, 4, 3], m, LossKind::Logistic);
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        let loss = BatchLoss::new(LossKind::Logistic, &inst.batch.targets).unwrap();
        let f = inst.outputs();
        let mut worst: f64 = 0.0;
        dualgn_core::directions::dual_gn_direction_observed(&jac, &loss, &f, &SubproblemSpec::new(1.0, tau, SolvePath::Dual).unwrap().with_tol(0.0), &mut |_, b| {
            for row in b.chunks_exact(3) {
                worst = worst.max(row.iter().sum::<f64>().abs());
            }
        }).unwrap();
        prop_assert!(worst <= 1e-10);
    }

    #[test]
    fn dual_is_cheaper_per_iteration_when_parameters_dominate(seed in any::<u64>(), kind in kind_strategy(), hidden in 8usize..20) {
        let inst = Instance::mlp(seed, &[4, hidden, 3], 2, kind);
        let p = inst.model.num_params();
        prop_assume!(p >= 4 * 2 * 3);
        let per_iter = |path| {
            let count = |tau| {
                let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
                let loss = BatchLoss::new(kind, &inst.batch.targets).unwrap();
                let f = inst.outputs();
                gn_direction(&jac, &loss, &f, &SubproblemSpec::new(1.0, tau, path).unwrap().with_tol(0.0)).unwrap().report.vector_op_scalar_count
            };
            count(3) - count(2)
        };
        prop_assert!(per_iter(SolvePath::Dual) < per_iter(SolvePath::Primal));
    }
}

#[test]
fn direction_is_not_linear_in_gamma() {
    let inst = Instance::mlp(17, &[3, 6, 3], 4, LossKind::Logistic);
    let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
    let loss = BatchLoss::new(LossKind::Logistic, &inst.batch.targets).unwrap();
    let f = inst.outputs();
    let solve = |gamma| dual_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, 12, SolvePath::Dual).unwrap().with_tol(1e-14)).unwrap().d;
    let big = solve(1.0);
    let small: Vec<f64> = solve(0.1).iter().map(|x| 10.0 * x).collect();
    let gap = big.iter().zip(&small).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-3, "gap {gap}");
}

#[test]
fn direction_vanishes_at_least_squares_minimizer() {
    let (d, k, m) = (3, 2, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_vec(&mut rng, m * d);
    let y = random_vec(&mut rng, m * k);
    // W* = Yᵀ X (XᵀX)⁻¹, row-major k × d
    let xm = DMatrix::from_row_slice(m, d, &x);
    let ym = DMatrix::from_row_slice(m, k, &y);
    let wstar = (xm.transpose() * &xm).cholesky().unwrap().solve(&(xm.transpose() * &ym)).transpose();
    let params: Vec<f64> = (0..k).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| wstar[(i, j)]).collect();
    let model = ModelSpec::linear(d, k).unwrap();
    let targets = OutputBlock::from_vec(m, k, y).unwrap();
    let batch = Batch::new(x, d, targets.clone()).unwrap();
    let jac = make_jacobian_operator(&model, &params, &batch).unwrap();
    let loss = BatchLoss::new(LossKind::Squared, &targets).unwrap();
    let f = model.forward_batch(&params, &batch.inputs).unwrap();
    for path in [SolvePath::Primal, SolvePath::Dual] {
        let res = gn_direction(&jac, &loss, &f, &SubproblemSpec::new(1.0, 20, path).unwrap()).unwrap();
        assert!(norm(&res.d) <= 1e-8, "{path:?}: {}", norm(&res.d));
    }
}

#[test]
fn exact_dual_closes_the_duality_gap() {
    for seed in 0..5 {
        let inst = Instance::mlp(seed, &[3, 5, 3], 3, LossKind::Squared);
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        let loss = BatchLoss::new(LossKind::Squared, &inst.batch.targets).unwrap();
        let f = inst.outputs();
        let res = dual_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(0.4, 9, SolvePath::Dual).unwrap().with_tol(0.0)).unwrap();
        let p = primal_objective(&jac, &loss, &f, 0.4, &res.d).unwrap();
        let d = dual_objective(&jac, &loss, &f, 0.4, res.alpha.as_ref().unwrap()).unwrap();
        assert!((p + d).abs() <= 1e-10 * (1.0 + p.abs()), "gap {}", p + d);
    }
}

#[test]
fn logistic_dual_objective_is_infinite_off_the_affine_hull() {
    let inst = Instance::mlp(2, &[3, 5, 3], 2, LossKind::Logistic);
    let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
    let loss = BatchLoss::new(LossKind::Logistic, &inst.batch.targets).unwrap();
    let f = inst.outputs();
    let res = dual_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(1.0, 6, SolvePath::Dual).unwrap()).unwrap();
    let alpha = res.alpha.unwrap();
    // α = g − β keeps 1ᵀα = 0, so μ = α + y sums to one.
    let value = dual_objective(&jac, &loss, &f, 1.0, &alpha);
    assert!(value.is_ok());
    let shifted = OutputBlock::from_vec(2, 3, alpha.as_slice().iter().map(|a| a + 0.1).collect()).unwrap();
    assert_eq!(dual_objective(&jac, &loss, &f, 1.0, &shifted).unwrap(), f64::INFINITY);
}
