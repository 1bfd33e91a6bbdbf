//! Conjugate gradient over abstract symmetric PSD operators.
//!
//! The recurrences are the textbook ones, started from `r⁰ = p⁰ = c − Q x⁰`:
//!
//! ```text
//! a   = ⟨r, r⟩ / ⟨p, Q p⟩
//! x  += a p
//! r  -= a Q p
//! b   = ⟨r', r'⟩ / ⟨r, r⟩
//! p   = r' + b p
//! ```
//!
//! With `x⁰ = 0` every iterate satisfies `⟨x, c⟩ ≥ 0`, which is what makes
//! truncated solves usable as descent directions.
//!
//! Operators implement [`CgOperator`]. The split between [`CgOperator::curvature`]
//! and [`CgOperator::apply_last`] lets an operator of the form `B + CᵀC`
//! evaluate `⟨p, Qp⟩ = ⟨p, Bp⟩ + ‖Cp‖²` without the `Cᵀ` half, and postpone
//! that half until the residual is actually needed. On the last allowed
//! iteration such an operator skips it altogether.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_finite, check_len, Error, Result};
use crate::rng;
use crate::vecops::{axpy, dot, norm};

/// Default relative residual tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative residual at which iteration stops even when `tol` is smaller.
///
/// Past this point the residual is round-off. On operators that are singular
/// off the constraint set (the projected dual) further steps chase that
/// round-off into the nullspace and diverge.
pub const RESIDUAL_FLOOR: f64 = 16.0 * f64::EPSILON;

/// Curvature at or below this value stops the iteration.
pub const BREAKDOWN_CURVATURE: f64 = 1e-300;

/// Max `‖P(Pz) − Pz‖` tolerated on the idempotence probe.
pub const PROJECTOR_PROBE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// `‖r⁰‖, ‖r¹‖, …`. Has `iterations + 1` entries unless
    /// `final_residual_skipped` is set, in which case the last one is absent.
    pub residual_norms: Vec<f64>,
    /// `⟨x^τ, c⟩`.
    pub inner_product_with_rhs: f64,
    /// Scalar operations spent in vector updates, inner products and the
    /// operator's own elementwise work (JVP/VJP internals excluded).
    pub vector_op_scalar_count: u64,
    pub operator_calls: usize,
    pub converged: bool,
    pub breakdown: bool,
    pub final_residual_skipped: bool,
}

/// A symmetric PSD operator as seen by [`cg_run`].
pub trait CgOperator {
    fn dim(&self) -> usize;

    /// Returns `⟨p, Qp⟩`. May cache work for a following [`Self::apply_last`].
    fn curvature(&mut self, p: &[f64]) -> Result<f64>;

    /// Writes `Q p` for the `p` most recently passed to [`Self::curvature`].
    fn apply_last(&mut self, p: &[f64], out: &mut [f64]) -> Result<()>;

    /// Notifies the operator that `x ← x + a·p` was taken with the last `p`.
    fn step_taken(&mut self, _a: f64) {}

    /// True when [`Self::apply_last`] does work that [`Self::curvature`] did
    /// not, so the solver may skip it on the final iteration.
    fn defers_apply(&self) -> bool {
        false
    }

    /// Scalar operations spent inside the operator so far.
    fn scalar_ops(&self) -> u64 {
        0
    }
}

/// Adapter for a plain `x ↦ Qx` callable.
pub struct FnOperator<F> {
    dim: usize,
    apply: F,
    cache: Vec<f64>,
    ops: u64,
}

impl<F> FnOperator<F>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    pub fn new(dim: usize, apply: F) -> Self {
        FnOperator {
            dim,
            apply,
            cache: vec![0.0; dim],
            ops: 0,
        }
    }
}

impl<F> CgOperator for FnOperator<F>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn curvature(&mut self, p: &[f64]) -> Result<f64> {
        (self.apply)(p, &mut self.cache)?;
        self.ops += self.dim as u64;
        Ok(dot(p, &self.cache))
    }

    fn apply_last(&mut self, _p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.cache);
        Ok(())
    }

    fn scalar_ops(&self) -> u64 {
        self.ops
    }
}

/// Runs conjugate gradient on `Q x = c` from `x0`.
///
/// Stops after `max_iter` iterations, when `‖r‖ ≤ max(tol, RESIDUAL_FLOOR) · max(1, ‖c‖)`, or on
/// breakdown (`⟨p, Qp⟩ ≤ 1e-300`), returning the current iterate in every
/// case. `observer` sees `(τ, x^τ)` for `τ = 0, 1, …`.
pub fn cg_run<O>(
    op: &mut O,
    c: &[f64],
    x0: &[f64],
    max_iter: usize,
    tol: f64,
    observer: &mut dyn FnMut(usize, &[f64]),
) -> Result<(Vec<f64>, CgReport)>
where
    O: CgOperator + ?Sized,
{
    let n = op.dim();
    check_len("cg right-hand side", n, c.len())?;
    check_len("cg initial point", n, x0.len())?;
    check_finite("cg right-hand side", c)?;
    check_finite("cg initial point", x0)?;
    if !(tol >= 0.0) {
        return Err(Error::Parameter("cg tolerance must be >= 0".into()));
    }
    let d = n as u64;
    let mut report = CgReport::default();
    let mut ops = d;
    let threshold = tol.max(RESIDUAL_FLOOR) * norm(c).max(1.0);

    let mut x = x0.to_vec();
    let mut r = c.to_vec();
    let mut qp = vec![0.0; n];
    if x0.iter().any(|&v| v != 0.0) {
        op.curvature(&x)?;
        op.apply_last(&x, &mut qp)?;
        report.operator_calls += 1;
        axpy(-1.0, &qp, &mut r);
        ops += d;
    }
    let mut rr = dot(&r, &r);
    ops += 2 * d;
    if !rr.is_finite() {
        return Err(Error::CgNumeric { iteration: 0 });
    }
    report.residual_norms.push(libm::sqrt(rr));
    observer(0, &x);
    let mut p = r.clone();

    if libm::sqrt(rr) <= threshold {
        report.converged = true;
    } else {
        for it in 1..=max_iter {
            let curv = op.curvature(&p)?;
            report.operator_calls += 1;
            if curv.is_nan() {
                return Err(Error::CgNumeric { iteration: it });
            }
            if curv <= BREAKDOWN_CURVATURE {
                report.breakdown = true;
                break;
            }
            let a = rr / curv;
            if !a.is_finite() {
                return Err(Error::CgNumeric { iteration: it });
            }
            axpy(a, &p, &mut x);
            op.step_taken(a);
            ops += d;
            report.iterations = it;
            observer(it, &x);

            let last = it == max_iter;
            if last && op.defers_apply() {
                report.final_residual_skipped = true;
                break;
            }
            op.apply_last(&p, &mut qp)?;
            axpy(-a, &qp, &mut r);
            let rr_next = dot(&r, &r);
            ops += 2 * d;
            if !rr_next.is_finite() {
                return Err(Error::CgNumeric { iteration: it });
            }
            report.residual_norms.push(libm::sqrt(rr_next));
            if libm::sqrt(rr_next) <= threshold {
                report.converged = true;
                break;
            }
            if last {
                break;
            }
            let b = rr_next / rr;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + b * *pi;
            }
            ops += d;
            rr = rr_next;
        }
    }
    report.inner_product_with_rhs = dot(&x, c);
    report.vector_op_scalar_count = ops + d + op.scalar_ops();
    Ok((x, report))
}

/// Conjugate gradient on `Q x = c` for a callable `Q`.
pub fn cg_solve<Q>(q_apply: Q, c: &[f64], x0: &[f64], max_iter: usize, tol: f64) -> Result<(Vec<f64>, CgReport)>
where
    Q: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let mut op = FnOperator::new(c.len(), q_apply);
    cg_run(&mut op, c, x0, max_iter, tol, &mut |_, _| {})
}

/// Checks that `P` is idempotent on a fixed pseudo-random probe.
pub fn check_projector<P>(dim: usize, project: &P) -> Result<()>
where
    P: Fn(&[f64], &mut [f64]),
{
    let mut rng = rng::stream(0, rng::STREAM_CHECK, u64::MAX);
    let probe: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut once = vec![0.0; dim];
    let mut twice = vec![0.0; dim];
    project(&probe, &mut once);
    project(&once, &mut twice);
    let gap = once
        .iter()
        .zip(&twice)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    if libm::sqrt(gap) > PROJECTOR_PROBE_TOL {
        return Err(Error::Contract("projector is not idempotent".into()));
    }
    Ok(())
}

/// Change of variables `x = P(s ⊙ x̃)` shared by the projected solvers.
#[derive(Debug, Clone)]
pub(crate) struct Reparam<'s> {
    pub scale: Option<&'s [f64]>,
}

impl Reparam<'_> {
    /// `out ← s ⊙ z` (or a copy when unscaled).
    pub fn scale(&self, z: &[f64], out: &mut [f64]) {
        match self.scale {
            Some(s) => out.iter_mut().zip(z.iter().zip(s)).for_each(|(o, (zi, si))| *o = zi * si),
            None => out.copy_from_slice(z),
        }
    }
}

fn check_scale(dim: usize, scale: Option<&[f64]>) -> Result<()> {
    if let Some(s) = scale {
        check_len("diagonal preconditioner", dim, s.len())?;
        if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter(
                "diagonal preconditioner entries must be positive and finite".into(),
            ));
        }
    }
    Ok(())
}

struct ProjectedOperator<'s, Q, P> {
    q_apply: Q,
    project: &'s P,
    reparam: Reparam<'s>,
    tmp_a: Vec<f64>,
    tmp_b: Vec<f64>,
    cache: Vec<f64>,
    ops: u64,
}

impl<Q, P> CgOperator for ProjectedOperator<'_, Q, P>
where
    Q: FnMut(&[f64], &mut [f64]) -> Result<()>,
    P: Fn(&[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.cache.len()
    }

    fn curvature(&mut self, p: &[f64]) -> Result<f64> {
        let n = self.cache.len() as u64;
        // s ⊙ P Q P (s ⊙ p)
        self.reparam.scale(p, &mut self.tmp_a);
        (self.project)(&self.tmp_a, &mut self.tmp_b);
        (self.q_apply)(&self.tmp_b, &mut self.tmp_a)?;
        (self.project)(&self.tmp_a, &mut self.tmp_b);
        self.reparam.scale(&self.tmp_b, &mut self.cache);
        self.ops += 5 * n;
        Ok(dot(p, &self.cache))
    }

    fn apply_last(&mut self, _p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.cache);
        Ok(())
    }

    fn scalar_ops(&self) -> u64 {
        self.ops
    }
}

/// Conjugate gradient for `min ½⟨x, Qx⟩ − ⟨x, c⟩` subject to `P x = x`.
///
/// Runs [`cg_run`] from zero on `x̃ ↦ s ⊙ P Q P (s ⊙ x̃)` with right-hand side
/// `s ⊙ P c` (`s = 1` when no preconditioner is given) and reports iterates
/// as `x = P(s ⊙ x̃)`, which lie in the range of `P` by construction.
pub fn projected_cg_solve<Q, P>(
    q_apply: Q,
    c: &[f64],
    project: P,
    max_iter: usize,
    tol: f64,
    diag_precond: Option<&[f64]>,
) -> Result<(Vec<f64>, CgReport)>
where
    Q: FnMut(&[f64], &mut [f64]) -> Result<()>,
    P: Fn(&[f64], &mut [f64]),
{
    projected_cg_solve_observed(q_apply, c, project, max_iter, tol, diag_precond, &mut |_, _| {})
}

/// [`projected_cg_solve`] reporting every mapped iterate `x^τ` to `observer`.
pub fn projected_cg_solve_observed<Q, P>(
    q_apply: Q,
    c: &[f64],
    project: P,
    max_iter: usize,
    tol: f64,
    diag_precond: Option<&[f64]>,
    observer: &mut dyn FnMut(usize, &[f64]),
) -> Result<(Vec<f64>, CgReport)>
where
    Q: FnMut(&[f64], &mut [f64]) -> Result<()>,
    P: Fn(&[f64], &mut [f64]),
{
    let n = c.len();
    check_scale(n, diag_precond)?;
    check_projector(n, &project)?;
    let reparam = Reparam {
        scale: diag_precond,
    };
    let mut pc = vec![0.0; n];
    project(c, &mut pc);
    let mut rhs = vec![0.0; n];
    reparam.scale(&pc, &mut rhs);

    let mut op = ProjectedOperator {
        q_apply,
        project: &project,
        reparam: reparam.clone(),
        tmp_a: vec![0.0; n],
        tmp_b: vec![0.0; n],
        cache: vec![0.0; n],
        ops: 0,
    };
    let mut scaled = vec![0.0; n];
    let mut mapped = vec![0.0; n];
    let to_original = |xt: &[f64], scaled: &mut [f64], mapped: &mut [f64]| {
        reparam.scale(xt, scaled);
        project(scaled, mapped);
    };
    let zero = vec![0.0; n];
    let (xt, mut report) = cg_run(&mut op, &rhs, &zero, max_iter, tol, &mut |it, xt| {
        to_original(xt, &mut scaled, &mut mapped);
        observer(it, &mapped);
    })?;
    to_original(&xt, &mut scaled, &mut mapped);
    report.inner_product_with_rhs = dot(&mapped, c);
    report.vector_op_scalar_count += 4 * n as u64;
    Ok((mapped, report))
}
