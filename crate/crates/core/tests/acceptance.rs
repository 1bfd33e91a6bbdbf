//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on failure.

mod common;

use std::time::{Duration, Instant};

use common::*;
use dualgn_core::cg::{cg_solve, projected_cg_solve_observed};
use dualgn_core::directions::{
    batch_gradient, dual_gn_direction, dual_gn_direction_observed, gn_direction, primal_gn_direction,
    regularized_dual_direction, sdca_closed_form_squared, soft_threshold, Regularizer, SolvePath,
    SubproblemSpec,
};
use dualgn_core::linop::{adjoint_dot_test, finite_diff_jvp, OutputBlock};
use dualgn_core::losses::BatchLoss;
use dualgn_core::models::synth_blobs;
use dualgn_core::trainer::{train, Method, TrainConfig};
use dualgn_core::{make_jacobian_operator, Batch, LossKind, ModelSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [LossKind; 2] = [LossKind::Squared, LossKind::Logistic];

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn c1_fidelity() -> Outcome {
    let start = Instant::now();
    let (mut adj, mut fd): (f64, f64) = (0.0, 0.0);
    let mut instances = 0;
    for seed in 0..50u64 {
        let inst = match seed % 3 {
            0 => Instance::linear(seed, 4, 3, 5, LossKind::Squared),
            1 => Instance::mlp(seed, &[3, 6, 3], 4, LossKind::Logistic),
            _ => Instance::mlp(seed, &[2, 5, 4, 2], 3, LossKind::Squared),
        };
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        adj = adj.max(adjoint_dot_test(&jac, seed, 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_vec(&mut rng, jac.dims().p);
        let exact = jac.apply(&u).unwrap();
        let approx = finite_diff_jvp(&inst.model, &inst.params, &inst.batch, &u, 1e-5).unwrap();
        fd = fd.max(rel_err(approx.as_slice(), exact.as_slice()));
        instances += 1;
    }
    let t = start.elapsed();
    check(
        adj <= 1e-10 && fd <= 1e-5 && within(t, 10),
        format!("{instances} instances, adjoint {adj:.1e} (≤1e-10), fd {fd:.1e} (≤1e-5), {:.2}s (<10s)", t.as_secs_f64()),
    )
}

fn c2_primal_dual() -> Outcome {
    let start = Instant::now();
    let (mut pd, mut oracle): (f64, f64) = (0.0, 0.0);
    let mut cases = 0;
    for seed in 0..10u64 {
        for kind in KINDS {
            let m = 1 + (seed as usize % 4);
            let dims: &[usize] = if seed % 2 == 0 { &[3, 6, 3] } else { &[2, 4, 4, 3] };
            let inst = Instance::mlp(seed, dims, m, kind);
            let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
            let p = jac.dims().p;
            assert!(p <= 60);
            let loss = BatchLoss::new(kind, &inst.batch.targets).unwrap();
            let f = inst.outputs();
            let gamma = [0.1, 1.0, 10.0][seed as usize % 3];
            let primal = primal_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, 3 * p, SolvePath::Primal).unwrap().with_tol(1e-14)).unwrap();
            let dual = dual_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, 3 * m * 3, SolvePath::Dual).unwrap().with_tol(1e-14)).unwrap();
            let dense = dense_gn_direction(&jac, kind, &f, &loss.grad(&f).unwrap(), gamma);
            pd = pd.max(rel_err(&dual.d, &primal.d));
            oracle = oracle.max(rel_err(&primal.d, &dense)).max(rel_err(&dual.d, &dense));
            cases += 1;
        }
    }
    let t = start.elapsed();
    check(
        pd <= 1e-6 && oracle <= 1e-8 && within(t, 30),
        format!("{cases} cases, primal/dual {pd:.1e} (≤1e-6), vs dense {oracle:.1e} (≤1e-8), {:.2}s (<30s)", t.as_secs_f64()),
    )
}

fn c3_descent() -> Outcome {
    let start = Instant::now();
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut solves = 0;
    for seed in 0..100u64 {
        for kind in KINDS {
            let inst = Instance::mlp(seed, &[3, 5, 3], 2 + seed as usize % 5, kind);
            let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
            let loss = BatchLoss::new(kind, &inst.batch.targets).unwrap();
            let f = inst.outputs();
            let grad = batch_gradient(&jac, &loss, &f).unwrap();
            let gamma = 10f64.powi(seed as i32 % 5 - 3);
            for tau in [1, 2, 4, 8] {
                for path in [SolvePath::Primal, SolvePath::Dual] {
                    let res = gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, tau, path).unwrap()).unwrap();
                    let scale = 1.0 + norm(&res.d) * norm(&grad);
                    let ip = dot(&res.d, &grad);
                    worst = worst.min(ip / scale);
                    if ip < -1e-10 * scale || res.descent_inner_product < -1e-10 * scale {
                        violations += 1;
                    }
                    solves += 1;
                }
            }
        }
    }
    let t = start.elapsed();
    check(
        violations == 0 && within(t, 60),
        format!("{solves} solves, {violations} violations, min ⟨d,∇h⟩/scale {worst:.1e}, {:.2}s (<60s)", t.as_secs_f64()),
    )
}

fn c4_tau_zero() -> Outcome {
    let mut exact = 0;
    for seed in 0..20u64 {
        let kind = KINDS[seed as usize % 2];
        let inst = Instance::mlp(seed, &[3, 6, 3], 4, kind);
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        let loss = BatchLoss::new(kind, &inst.batch.targets).unwrap();
        let f = inst.outputs();
        let gamma = 0.37 * (seed + 1) as f64;
        let grad = batch_gradient(&jac, &loss, &f).unwrap();
        let res = dual_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, 0, SolvePath::Dual).unwrap()).unwrap();
        let expected: Vec<f64> = grad.iter().map(|g| gamma * g).collect();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&res.d) == bits(&expected) {
            exact += 1;
        }
    }
    check(exact == 20, format!("{exact}/20 seeds bit-exact d = γ∇h_S"))
}

fn c5_constraints() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = Instance::mlp(seed, &[3, 6, 3], 1 + seed as usize % 4, LossKind::Logistic);
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        let loss = BatchLoss::new(LossKind::Logistic, &inst.batch.targets).unwrap();
        let f = inst.outputs();
        let spec = SubproblemSpec::new(1.0, 12, SolvePath::Dual).unwrap().with_tol(0.0);
        dual_gn_direction_observed(&jac, &loss, &f, &spec, &mut |_, beta| {
            for row in beta.chunks_exact(3) {
                worst_sum = worst_sum.max(row.iter().sum::<f64>().abs());
            }
        })
        .unwrap();
    }

    let mut kkt_err: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..30 {
        let k = 2 + trial % 3;
        let blocks = 1 + (trial / 3) % 3;
        let n = k * blocks;
        assert!(n <= 12);
        let q = random_spd(&mut rng, n, 0.05);
        let c = random_vec(&mut rng, n);
        let project = zero_sum_blocks(k);
        let mut pmat = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let mut col = vec![0.0; n];
            project(&e, &mut col);
            for i in 0..n {
                pmat[(i, j)] = col[i];
            }
        }
        let precond: Option<Vec<f64>> = (trial % 2 == 1).then(|| (0..n).map(|_| 0.2 + rng.random::<f64>()).collect());
        let (x, _) = projected_cg_solve_observed(matvec(&q), &c, &project, 4 * n, 1e-14, precond.as_deref(), &mut |_, x| {
            for row in x.chunks_exact(k) {
                worst_sum = worst_sum.max(row.iter().sum::<f64>().abs());
            }
        })
        .unwrap();
        let oracle = dense_kkt(&q, &c, &pmat);
        kkt_err = kkt_err.max(rel_err(&x, &oracle));
    }
    check(
        worst_sum <= 1e-10 && kkt_err <= 1e-8,
        format!("max |1ᵀβ_i| {worst_sum:.1e} (≤1e-10), KKT rel err {kkt_err:.1e} (≤1e-8)"),
    )
}

fn c6_cg_positive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let q = random_spd(&mut rng, 6, 1e-3);
        let c = random_vec(&mut rng, 6);
        for tau in 1..=6 {
            let (x, rep) = cg_solve(matvec(&q), &c, &[0.0; 6], tau, 0.0).unwrap();
            worst = worst.min(rep.inner_product_with_rhs).min(dot(&x, &c));
        }
    }
    check(worst >= -1e-12, format!("min ⟨x^τ, c⟩ = {worst:.3e} over 600 solves (≥ -1e-12)"))
}

fn c7_sdca() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, k) = (2 + seed as usize % 5, 1 + seed as usize % 4);
        let model = ModelSpec::linear(d, k).unwrap();
        let params = random_vec(&mut rng, d * k);
        let x = random_vec(&mut rng, d);
        let targets = OutputBlock::from_vec(1, k, random_vec(&mut rng, k)).unwrap();
        let batch = Batch::new(x.clone(), d, targets.clone()).unwrap();
        let jac = make_jacobian_operator(&model, &params, &batch).unwrap();
        let loss = BatchLoss::new(LossKind::Squared, &targets).unwrap();
        let f = model.forward_batch(&params, &x).unwrap();
        let gamma = 0.1 + rng.random::<f64>() * 3.0;
        let res = dual_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, 2 * k, SolvePath::Dual).unwrap().with_tol(1e-15)).unwrap();
        let (alpha, dir) = sdca_closed_form_squared(&x, f.row(0), targets.row(0), gamma).unwrap();
        for (a, b) in alpha.iter().zip(res.alpha.as_ref().unwrap().as_slice()) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in dir.iter().zip(&res.d) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-10, format!("50 seeds, max |closed form − CG| {worst:.1e} (≤1e-10)"))
}

/// Least-squares instance `min (1/2m)‖Xw − y‖² + λ‖w‖₁` whose solution has no zero coordinate.
struct Lasso {
    model: ModelSpec,
    x: Vec<f64>,
    targets: OutputBlock,
    d: usize,
    m: usize,
    lambda: f64,
}

impl Lasso {
    fn new() -> Self {
        let (d, m) = (6, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w_true = [1.5, -2.0, 0.8, -1.1, 2.4, 0.6];
        let x = random_vec(&mut rng, m * d);
        let y: Vec<f64> = x
            .chunks_exact(d)
            .map(|row| dot(row, &w_true) + 0.05 * (rng.random::<f64>() - 0.5))
            .collect();
        Lasso {
            model: ModelSpec::linear(d, 1).unwrap(),
            x,
            targets: OutputBlock::from_vec(m, 1, y).unwrap(),
            d,
            m,
            lambda: 0.02,
        }
    }

    fn prox_gradient(&self, iters: usize) -> Vec<f64> {
        let xm = DMatrix::from_row_slice(self.m, self.d, &self.x);
        let lip = (xm.transpose() * &xm).symmetric_eigenvalues().max() / self.m as f64;
        let step = 1.0 / lip;
        let mut w = vec![0.0; self.d];
        for _ in 0..iters {
            let resid: Vec<f64> = self.x.chunks_exact(self.d).zip(self.targets.as_slice()).map(|(r, y)| dot(r, &w) - y).collect();
            let grad: Vec<f64> = (0..self.d)
                .map(|j| (0..self.m).map(|i| self.x[i * self.d + j] * resid[i]).sum::<f64>() / self.m as f64)
                .collect();
            let z: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            w = soft_threshold(&z, step * self.lambda).unwrap();
        }
        w
    }

    /// Iterates `w ← w − d` with exact regularized dual directions.
    fn spl_fixed_point(&self, gamma: f64, max_iters: usize) -> Vec<f64> {
        let batch = Batch::new(self.x.clone(), self.d, self.targets.clone()).unwrap();
        let loss = BatchLoss::new(LossKind::Squared, &self.targets).unwrap();
        let spec = SubproblemSpec::new(gamma, 4 * self.m, SolvePath::Dual).unwrap().with_tol(1e-15);
        let mut w = vec![0.0; self.d];
        for _ in 0..max_iters {
            let jac = make_jacobian_operator(&self.model, &w, &batch).unwrap();
            let f = self.model.forward_batch(&w, &batch.inputs).unwrap();
            let res = regularized_dual_direction(&jac, &loss, &f, &spec, &w, Regularizer::L1(self.lambda)).unwrap();
            drop(jac);
            w.iter_mut().zip(&res.d).for_each(|(wi, di)| *wi -= di);
            if norm(&res.d) <= 1e-15 {
                break;
            }
        }
        w
    }
}

fn c8_regularized() -> Outcome {
    let mut identical = 0;
    for seed in 0..10u64 {
        let kind = KINDS[seed as usize % 2];
        let inst = Instance::mlp(seed, &[3, 5, 3], 3, kind);
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        let loss = BatchLoss::new(kind, &inst.batch.targets).unwrap();
        let f = inst.outputs();
        let spec = SubproblemSpec::new(0.5, seed as usize % 4, SolvePath::Dual).unwrap();
        let plain = dual_gn_direction(&jac, &loss, &f, &spec).unwrap();
        let reg = regularized_dual_direction(&jac, &loss, &f, &spec, &inst.params, Regularizer::None).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&plain.d) == bits(&reg.d) && plain.alpha == reg.alpha && plain.report == reg.report {
            identical += 1;
        }
    }

    let lasso = Lasso::new();
    let reference = lasso.prox_gradient(10_000);
    let fixed = lasso.spl_fixed_point(1.0, 5_000);
    let gap = reference.iter().zip(&fixed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let dense = reference.iter().all(|w| w.abs() > 1e-3);

    let st = soft_threshold(&[1.2], 0.5).unwrap()[0] == 1.2 - 0.5
        && soft_threshold(&[-0.3], 0.5).unwrap()[0] == 0.0
        && soft_threshold(&[0.4, -7.0], 0.0).unwrap() == vec![0.4, -7.0];
    check(
        identical == 10 && gap <= 1e-6 && dense && st,
        format!("reg=none identical {identical}/10, l1 fixed point vs prox-grad {gap:.1e} (≤1e-6, solution dense: {dense}), soft-threshold cases {}", if st { "exact" } else { "WRONG" }),
    )
}

fn c9_cost() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    let counted = |inst: &Instance, tau: usize, path: SolvePath| {
        let jac = make_jacobian_operator(&inst.model, &inst.params, &inst.batch).unwrap();
        let loss = BatchLoss::new(inst.kind, &inst.batch.targets).unwrap();
        let f = inst.outputs();
        let res = gn_direction(&jac, &loss, &f, &SubproblemSpec::new(1.0, tau, path).unwrap().with_tol(0.0)).unwrap();
        (res.report.vector_op_scalar_count, jac.jvp_calls(), jac.vjp_calls(), res.report.iterations)
    };
    // p = 4mk exactly (linear 8→3 and mlp 3-3-3, m = 2) and p ≫ 4mk.
    let cases = [
        Instance::linear(1, 8, 3, 2, LossKind::Logistic),
        Instance::mlp(2, &[3, 3, 3], 2, LossKind::Squared),
        Instance::mlp(3, &[4, 16, 3], 4, LossKind::Logistic),
        Instance::mlp(4, &[4, 16, 3], 4, LossKind::Squared),
    ];
    for inst in &cases {
        let (p, mk) = (inst.model.num_params(), inst.batch.len() * inst.model.output_dim());
        assert!(p >= 4 * mk);
        let mut slopes = [0.0; 2];
        for (slot, path) in [SolvePath::Primal, SolvePath::Dual].into_iter().enumerate() {
            let (lo, ..) = counted(inst, 2, path);
            let (hi, ..) = counted(inst, 4, path);
            slopes[slot] = (hi - lo) as f64 / 2.0;
            for tau in [0, 1, 2, 4] {
                let (_, jvp, vjp, iters) = counted(inst, tau, path);
                if iters != tau || jvp != tau || vjp != tau + 1 {
                    ok = false;
                }
            }
        }
        ok &= slopes[1] < slopes[0];
        lines.push(format!("p={p},mk={mk}: dual {}/it vs primal {}/it", slopes[1], slopes[0]));
    }
    check(ok, format!("{}; calls τ JVP and τ+1 VJP on both paths for τ∈{{0,1,2,4}}", lines.join("; ")))
}

fn c10_training() -> Outcome {
    let start = Instant::now();
    let data = synth_blobs(10, 300, 2, 3, 0.3).unwrap();
    let mut cfg = TrainConfig::new(ModelSpec::mlp(&[2, 16, 3]).unwrap(), LossKind::Logistic);
    cfg.method = Method::ArmijoSpl;
    cfg.gamma = 1.0;
    cfg.tau = 2;
    cfg.batch_size = 32;
    cfg.epochs = 30;
    cfg.armijo.beta = 1e-4;
    cfg.seed = 10;
    let hist = train(&cfg, &data).unwrap();
    let mut reached = None;
    for r in &hist.records {
        if let (Some(acc), None) = (r.train_acc, reached) {
            if acc >= 0.95 {
                reached = Some(r.epoch + 1);
            }
        }
    }
    let armijo_ok = hist
        .records
        .iter()
        .filter_map(|r| r.armijo)
        .filter(|a| a.accepted)
        .all(|a| a.satisfies(cfg.armijo.beta));
    let rejected = hist.records.iter().filter_map(|r| r.armijo).filter(|a| !a.accepted).count();
    let final_acc = hist.records.last().and_then(|r| r.train_acc).unwrap_or(0.0);
    let t = start.elapsed();
    check(
        reached.is_some() && armijo_ok && hist.aborted.is_none(),
        format!(
            "acc ≥0.95 at epoch {} (≤30), final acc {final_acc:.3}, {} steps, Armijo inequality on accepted steps: {armijo_ok}, unaccepted steps {rejected}, {:.2}s",
            reached.map_or("never".to_string(), |e| e.to_string()),
            hist.records.len(),
            t.as_secs_f64()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("adjoint & gradient fidelity", c1_fidelity),
        ("primal-dual direction equivalence", c2_primal_dual),
        ("descent for every prefix", c3_descent),
        ("tau=0 gradient identity", c4_tau_zero),
        ("constraint preservation", c5_constraints),
        ("cg positivity lemma", c6_cg_positive),
        ("sdca closed form", c7_sdca),
        ("regularized variant", c8_regularized),
        ("cost asymmetry", c9_cost),
        ("training smoke", c10_training),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let out = run();
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {name}: {}", i + 1, out.detail);
        failed += usize::from(!out.pass);
    }
    let total = start.elapsed();
    let fast = within(total, 300);
    println!("[{}] suite runtime {:.1}s (<300s)", if fast { "PASS" } else { "FAIL" }, total.as_secs_f64());
    if failed > 0 || !fast {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
