//! Built-in property suites on fixed seeds.
//!
//! Each suite measures one or more invariants and compares them with a
//! tolerance. Dense references are materialized with `nalgebra`, so keep the
//! instances small.

use std::fmt;

use dualgn_core::cg::projected_cg_solve_observed;
use dualgn_core::directions::{
    dual_gn_direction, dual_gn_direction_observed, gn_direction, primal_gn_direction, SolvePath, SubproblemSpec,
};
use dualgn_core::linop::{adjoint_dot_test, finite_diff_jvp};
use dualgn_core::losses::BatchLoss;
use dualgn_core::models::synth_blobs;
use dualgn_core::{make_jacobian_operator, Batch, JacobianOperator, LossKind, ModelSpec, OutputBlock};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Adjoint,
    Descent,
    Duality,
    Constraints,
    Cost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub bound: Bound,
    pub tolerance: f64,
}

impl Check {
    fn at_most(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Check { name, measured, bound: Bound::AtMost, tolerance }
    }

    fn at_least(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Check { name, measured, bound: Bound::AtLeast, tolerance }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.measured <= self.tolerance,
            Bound::AtLeast => self.measured >= self.tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {:.3e} (want {op} {:.1e})", self.name, self.measured, self.tolerance)
    }
}

pub fn run_suite(suite: Suite) -> dualgn_core::Result<Vec<Check>> {
    match suite {
        Suite::Adjoint => adjoint(),
        Suite::Descent => descent(),
        Suite::Duality => duality(),
        Suite::Constraints => constraints(),
        Suite::Cost => cost(),
    }
}

const KINDS: [LossKind; 2] = [LossKind::Squared, LossKind::Logistic];

struct Instance {
    model: ModelSpec,
    params: Vec<f64>,
    batch: Batch,
    kind: LossKind,
}

impl Instance {
    fn new(seed: u64, model: ModelSpec, m: usize, kind: LossKind) -> dualgn_core::Result<Self> {
        let k = model.output_dim();
        let params = model.init_params(seed);
        let data = synth_blobs(seed, m.max(k), model.input_dim(), k, 0.7)?;
        let idx: Vec<usize> = (0..m).collect();
        let mut batch = data.batch(&idx)?;
        if kind == LossKind::Squared {
            for (j, t) in batch.targets.as_mut_slice().iter_mut().enumerate() {
                *t += 0.5 * pseudo_random(seed, j as u64);
            }
        }
        Ok(Instance { model, params, batch, kind })
    }

    fn jac(&self) -> dualgn_core::Result<JacobianOperator<'_>> {
        make_jacobian_operator(&self.model, &self.params, &self.batch)
    }

    fn loss(&self) -> dualgn_core::Result<BatchLoss<'_>> {
        BatchLoss::new(self.kind, &self.batch.targets)
    }

    fn outputs(&self) -> dualgn_core::Result<OutputBlock> {
        self.model.forward_batch(&self.params, &self.batch.inputs)
    }
}

/// Deterministic value in `[-1, 1)` (splitmix64).
fn pseudo_random(seed: u64, i: u64) -> f64 {
    let mut z = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-300)
}

fn adjoint() -> dualgn_core::Result<Vec<Check>> {
    let (mut adj, mut fd): (f64, f64) = (0.0, 0.0);
    for seed in 0..50u64 {
        let model = if seed % 3 == 0 {
            ModelSpec::linear(4, 3)?
        } else {
            ModelSpec::mlp(&[3, 2 + seed as usize % 5, 3])?
        };
        let inst = Instance::new(seed, model, 1 + seed as usize % 4, LossKind::Logistic)?;
        let jac = inst.jac()?;
        adj = adj.max(adjoint_dot_test(&jac, seed, 3)?);
        let u: Vec<f64> = (0..jac.dims().p).map(|i| pseudo_random(seed, i as u64)).collect();
        let exact = jac.apply(&u)?;
        let approx = finite_diff_jvp(&inst.model, &inst.params, &inst.batch, &u, 1e-5)?;
        fd = fd.max(rel_err(approx.as_slice(), exact.as_slice()));
    }
    Ok(vec![
        Check::at_most("adjoint dot test, max relative gap over 50 instances", adj, 1e-10),
        Check::at_most("JVP vs central differences, max relative error", fd, 1e-5),
    ])
}

fn descent() -> dualgn_core::Result<Vec<Check>> {
    let mut worst = f64::INFINITY;
    for seed in 0..50u64 {
        for kind in KINDS {
            let inst = Instance::new(seed, ModelSpec::mlp(&[3, 5, 3])?, 2 + seed as usize % 5, kind)?;
            let jac = inst.jac()?;
            let loss = inst.loss()?;
            let f = inst.outputs()?;
            let grad = dualgn_core::directions::batch_gradient(&jac, &loss, &f)?;
            for tau in [1, 2, 4, 8] {
                for path in [SolvePath::Primal, SolvePath::Dual] {
                    let gamma = 10f64.powi(seed as i32 % 5 - 3);
                    let res = gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, tau, path)?)?;
                    let ip: f64 = res.d.iter().zip(&grad).map(|(a, b)| a * b).sum();
                    worst = worst.min(ip / (1.0 + norm(&res.d) * norm(&grad)));
                }
            }
        }
    }
    Ok(vec![Check::at_least(
        "min <d, grad h> / (1 + |d||grad h|) over 800 solves",
        worst,
        -1e-10,
    )])
}

fn dense_jacobian(jac: &JacobianOperator<'_>) -> dualgn_core::Result<DMatrix<f64>> {
    let dims = jac.dims();
    let mut out = DMatrix::zeros(dims.outputs(), dims.p);
    let mut e = vec![0.0; dims.p];
    for j in 0..dims.p {
        e[j] = 1.0;
        let col = jac.apply(&e)?;
        out.column_mut(j).copy_from_slice(col.as_slice());
        e[j] = 0.0;
    }
    Ok(out)
}

fn dense_hessian(loss: &BatchLoss<'_>, f: &OutputBlock) -> dualgn_core::Result<DMatrix<f64>> {
    let n = f.as_slice().len();
    let mut out = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        out.column_mut(j).copy_from_slice(&loss.hvp(f, &e)?);
        e[j] = 0.0;
    }
    Ok(out)
}

fn duality() -> dualgn_core::Result<Vec<Check>> {
    let (mut gap, mut dense_gap): (f64, f64) = (0.0, 0.0);
    for seed in 0..10u64 {
        for kind in KINDS {
            let m = 1 + seed as usize % 4;
            let inst = Instance::new(seed, ModelSpec::mlp(&[3, 6, 3])?, m, kind)?;
            let jac = inst.jac()?;
            let loss = inst.loss()?;
            let f = inst.outputs()?;
            let p = jac.dims().p;
            let gamma = [0.1, 1.0, 10.0][seed as usize % 3];
            let primal = primal_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, 3 * p, SolvePath::Primal)?.with_tol(1e-14))?;
            let dual = dual_gn_direction(&jac, &loss, &f, &SubproblemSpec::new(gamma, 9 * m, SolvePath::Dual)?.with_tol(1e-14))?;

            let jm = dense_jacobian(&jac)?;
            let h = dense_hessian(&loss, &f)?;
            let g = loss.grad(&f)?;
            let lhs = jm.transpose() * h * &jm + DMatrix::identity(p, p) * (m as f64 / gamma);
            let rhs = jm.transpose() * DVector::from_column_slice(g.as_slice());
            let dense = lhs
                .cholesky()
                .ok_or_else(|| dualgn_core::Error::Contract("dense system not positive definite".into()))?
                .solve(&rhs);
            gap = gap.max(rel_err(&dual.d, &primal.d));
            dense_gap = dense_gap.max(rel_err(&primal.d, dense.as_slice())).max(rel_err(&dual.d, dense.as_slice()));
        }
    }
    Ok(vec![
        Check::at_most("exact primal vs exact dual direction, relative", gap, 1e-6),
        Check::at_most("both paths vs dense oracle, relative", dense_gap, 1e-8),
    ])
}

fn zero_sum_rows(k: usize) -> impl Fn(&[f64], &mut [f64]) {
    move |x, out| {
        for (o, xi) in out.chunks_exact_mut(k).zip(x.chunks_exact(k)) {
            let mean = xi.iter().sum::<f64>() / k as f64;
            o.iter_mut().zip(xi).for_each(|(oj, xj)| *oj = xj - mean);
        }
    }
}

fn constraints() -> dualgn_core::Result<Vec<Check>> {
    let mut dual_sum: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = Instance::new(seed, ModelSpec::mlp(&[3, 6, 3])?, 1 + seed as usize % 4, LossKind::Logistic)?;
        let jac = inst.jac()?;
        let loss = inst.loss()?;
        let f = inst.outputs()?;
        let spec = SubproblemSpec::new(1.0, 12, SolvePath::Dual)?.with_tol(0.0);
        dual_gn_direction_observed(&jac, &loss, &f, &spec, &mut |_, beta| {
            for row in beta.chunks_exact(3) {
                dual_sum = dual_sum.max(row.iter().sum::<f64>().abs());
            }
        })?;
    }

    let (mut kkt, mut iter_sum): (f64, f64) = (0.0, 0.0);
    for trial in 0..30u64 {
        let k = 2 + trial as usize % 3;
        let n = k * (1 + (trial as usize / 3) % 3);
        let a = DMatrix::from_fn(n, n, |i, j| pseudo_random(trial, (i * n + j) as u64));
        let q = a.transpose() * &a + DMatrix::identity(n, n) * 0.05;
        let c: Vec<f64> = (0..n).map(|i| pseudo_random(trial + 1000, i as u64)).collect();
        let project = zero_sum_rows(k);
        let pmat = DMatrix::from_fn(n, n, |i, j| if i / k == j / k { f64::from(u8::from(i == j)) - 1.0 / k as f64 } else { 0.0 });
        let precond: Option<Vec<f64>> = (trial % 2 == 1).then(|| (0..n).map(|i| 0.7 + 0.5 * pseudo_random(trial + 2000, i as u64)).collect());
        let q_apply = |x: &[f64], out: &mut [f64]| {
            out.copy_from_slice((&q * DVector::from_column_slice(x)).as_slice());
            Ok(())
        };
        let (x, _) = projected_cg_solve_observed(q_apply, &c, &project, 4 * n, 1e-14, precond.as_deref(), &mut |_, x| {
            for row in x.chunks_exact(k) {
                iter_sum = iter_sum.max(row.iter().sum::<f64>().abs());
            }
        })?;
        // Minimizer over range(P): x = P (PQP)⁺ P c.
        let reduced = &pmat * &q * &pmat;
        let pc = &pmat * DVector::from_column_slice(&c);
        let y = reduced
            .svd(true, true)
            .solve(&pc, 1e-10)
            .map_err(|e| dualgn_core::Error::Contract(e.to_string()))?;
        let reference = &pmat * y;
        kkt = kkt.max(rel_err(&x, reference.as_slice()));
    }
    Ok(vec![
        Check::at_most("logistic dual iterates, max |1'beta_i|", dual_sum, 1e-10),
        Check::at_most("projected CG iterates, max block sum", iter_sum, 1e-10),
        Check::at_most("projected CG vs dense reduced solve, relative", kkt, 1e-8),
    ])
}

fn cost() -> dualgn_core::Result<Vec<Check>> {
    let cases = [
        (ModelSpec::linear(8, 3)?, 2, LossKind::Logistic),
        (ModelSpec::mlp(&[3, 3, 3])?, 2, LossKind::Squared),
        (ModelSpec::mlp(&[4, 16, 3])?, 4, LossKind::Logistic),
        (ModelSpec::mlp(&[4, 16, 3])?, 4, LossKind::Squared),
    ];
    let mut ratio: f64 = 0.0;
    let mut call_mismatch = 0usize;
    for (seed, (model, m, kind)) in cases.into_iter().enumerate() {
        let inst = Instance::new(seed as u64, model, m, kind)?;
        let counted = |tau: usize, path: SolvePath| -> dualgn_core::Result<(u64, usize, usize, usize)> {
            let jac = inst.jac()?;
            let res = gn_direction(&jac, &inst.loss()?, &inst.outputs()?, &SubproblemSpec::new(1.0, tau, path)?.with_tol(0.0))?;
            Ok((res.report.vector_op_scalar_count, jac.jvp_calls(), jac.vjp_calls(), res.report.iterations))
        };
        let mut slopes = [0.0; 2];
        for (slot, path) in [SolvePath::Primal, SolvePath::Dual].into_iter().enumerate() {
            slopes[slot] = (counted(4, path)?.0 as f64 - counted(2, path)?.0 as f64) / 2.0;
            for tau in [0, 1, 2, 4] {
                let (_, jvp, vjp, iters) = counted(tau, path)?;
                if iters != tau || jvp != tau || vjp != tau + 1 {
                    call_mismatch += 1;
                }
            }
        }
        ratio = ratio.max(slopes[1] / slopes[0]);
    }
    Ok(vec![
        Check::at_most("per-iteration scalar ops, max dual/primal ratio with p >= 4mk", ratio, 1.0 - 1e-12),
        Check::at_most("solves whose JVP/VJP counts differ from tau and tau+1", call_mismatch as f64, 0.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_random_stays_in_range() {
        for i in 0..1000 {
            let v = pseudo_random(7, i);
            assert!((-1.0..1.0).contains(&v));
        }
        assert_ne!(pseudo_random(1, 0), pseudo_random(2, 0));
    }

    #[test]
    fn check_display() {
        let c = Check::at_most("x", 2.0, 1.0);
        assert!(!c.passed());
        assert!(c.to_string().starts_with("FAIL x"));
        assert!(Check::at_least("y", 0.0, -1e-10).passed());
    }
}
