//! Prox-linear directions.
//!
//! For a batch of size `m` with outputs `f_S`, Jacobian `J` and per-sample loss
//! gradients `g = ∇ℓ_S(f_S)`, the quadratic prox-linear subproblem is
//!
//! ```text
//! min_d  ½⟨Jd, H Jd⟩ − ⟨g, Jd⟩ + (m/2γ)‖d‖²
//! ```
//!
//! The primal solver runs CG on `(J*HJ + (m/γ)I) d = J*g`. The dual solver
//! works with `β = g − α` over the `m × k` outputs:
//!
//! ```text
//! P(H† + (γ/m) JJ*)P β = (γ/m) P J J* g,     d = (γ/m) J* (g − β)
//! ```
//!
//! where `P` is the identity for the squared loss and the per-sample
//! zero-sum projector for the logistic loss. Starting from `β = 0` the
//! zeroth dual iterate is `d = γ ∇h_S`.
//!
//! The dual operator is applied in factored form: `⟨p, Qp⟩` needs one VJP,
//! the residual update needs one JVP, and `J*β` is accumulated from the VJPs
//! already taken. A `τ`-iteration solve therefore costs `τ` JVPs and `τ + 1`
//! VJPs on either path, and the dual's per-iteration vector work is `O(mk)`
//! plus two passes over `p` against six for the primal.

use alloc::vec;
use alloc::vec::Vec;

use crate::cg::{self, cg_run, CgOperator, CgReport};
use crate::error::{check_len, Error, Result};
use crate::linop::{JacobianOperator, OutputBlock};
use crate::losses::{softmax, BatchLoss, LossKind, SOFTMAX_FLOOR};
use crate::vecops::{axpy, dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePath {
    Primal,
    Dual,
}

/// Parameters of one direction solve. Batch size, output dimension and loss
/// kind are taken from the operator and loss arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubproblemSpec {
    pub gamma: f64,
    pub tau: usize,
    pub path: SolvePath,
    /// Relative residual tolerance passed to CG.
    pub tol: f64,
}

impl SubproblemSpec {
    pub fn new(gamma: f64, tau: usize, path: SolvePath) -> Result<Self> {
        let spec = SubproblemSpec {
            gamma,
            tau,
            path,
            tol: cg::DEFAULT_TOL,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(alloc::format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Parameter("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionResult {
    pub d: Vec<f64>,
    /// Dual solution `α = g − β`; `None` on the primal path.
    pub alpha: Option<OutputBlock>,
    pub report: CgReport,
    /// `⟨d, ∇h_S⟩`.
    pub descent_inner_product: f64,
}

/// Extra regularizer `ρ` on the next iterate `w − d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    /// `λ‖·‖₁`
    L1(f64),
    /// `(λ/2)‖·‖²`
    L2(f64),
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::None => Ok(()),
            Regularizer::L1(l) | Regularizer::L2(l) if l >= 0.0 && l.is_finite() => Ok(()),
            _ => Err(Error::Parameter(
                "regularization strength must be finite and >= 0".into(),
            )),
        }
    }

    /// `prox_{γρ}(z)`.
    pub fn prox(&self, z: &[f64], gamma: f64) -> Vec<f64> {
        match *self {
            Regularizer::None => z.to_vec(),
            Regularizer::L1(l) => shrink(z, l * gamma),
            Regularizer::L2(l) => z.iter().map(|zi| zi / (1.0 + gamma * l)).collect(),
        }
    }

    /// Inverse strong-convexity modulus `1/μ` of the regularized proximity term.
    fn inverse_modulus(&self, gamma: f64, m: f64) -> f64 {
        match *self {
            Regularizer::None | Regularizer::L1(_) => gamma / m,
            Regularizer::L2(l) => 1.0 / (m / gamma + m * l),
        }
    }
}

fn shrink(z: &[f64], t: f64) -> Vec<f64> {
    z.iter()
        .map(|&zi| {
            if zi > t {
                zi - t
            } else if zi < -t {
                zi + t
            } else {
                0.0
            }
        })
        .collect()
}

/// Component-wise `ST_t(z)`.
pub fn soft_threshold(z: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::Parameter("soft-threshold level must be >= 0".into()));
    }
    Ok(shrink(z, t))
}

fn check_shapes(jac: &JacobianOperator<'_>, loss: &BatchLoss<'_>, f: &OutputBlock) -> Result<()> {
    let dims = jac.dims();
    check_len("batch outputs rows", dims.m, f.rows())?;
    check_len("batch outputs cols", dims.k, f.cols())?;
    check_len("loss targets rows", dims.m, loss.targets().rows())?;
    check_len("loss targets cols", dims.k, loss.targets().cols())
}

fn divide(u: &[f64], m: usize) -> Vec<f64> {
    let m = m as f64;
    u.iter().map(|x| x / m).collect()
}

/// `∇h_S = (1/m) J* ∇ℓ_S(f_S)`.
pub fn batch_gradient(jac: &JacobianOperator<'_>, loss: &BatchLoss<'_>, f: &OutputBlock) -> Result<Vec<f64>> {
    check_shapes(jac, loss, f)?;
    let g = loss.grad(f)?;
    Ok(divide(&jac.adjoint(&g)?, jac.dims().m))
}

/// Loss curvature at `f_S`, evaluated once per solve.
struct Curvature {
    kind: LossKind,
    k: usize,
    /// Softmax probabilities (logistic only).
    sigma: Vec<f64>,
}

impl Curvature {
    fn new(kind: LossKind, f: &OutputBlock) -> Self {
        let sigma = match kind {
            LossKind::Squared => Vec::new(),
            LossKind::Logistic => f.iter_rows().flat_map(softmax).collect(),
        };
        Curvature {
            kind,
            k: f.cols(),
            sigma,
        }
    }

    /// `out ← H v`; returns scalar ops.
    fn hess(&self, v: &[f64], out: &mut [f64]) -> u64 {
        match self.kind {
            LossKind::Squared => {
                out.copy_from_slice(v);
                0
            }
            LossKind::Logistic => {
                for ((o, vi), s) in out
                    .chunks_exact_mut(self.k)
                    .zip(v.chunks_exact(self.k))
                    .zip(self.sigma.chunks_exact(self.k))
                {
                    let sv = dot(s, vi);
                    for ((oj, vj), sj) in o.iter_mut().zip(vi).zip(s) {
                        *oj = sj * vj - sv * sj;
                    }
                }
                3 * v.len() as u64
            }
        }
    }

    /// `out ← H† β` on the zero-sum subspace; returns scalar ops.
    fn pinv(&self, beta: &[f64], out: &mut [f64]) -> u64 {
        match self.kind {
            LossKind::Squared => {
                out.copy_from_slice(beta);
                0
            }
            LossKind::Logistic => {
                for ((o, b), s) in out.iter_mut().zip(beta).zip(&self.sigma) {
                    *o = b / s.max(SOFTMAX_FLOOR);
                }
                beta.len() as u64
            }
        }
    }

    /// `out ← P x`; returns scalar ops.
    fn project(&self, x: &[f64], out: &mut [f64]) -> u64 {
        match self.kind {
            LossKind::Squared => {
                out.copy_from_slice(x);
                0
            }
            LossKind::Logistic => {
                for (o, xi) in out.chunks_exact_mut(self.k).zip(x.chunks_exact(self.k)) {
                    let mean = xi.iter().sum::<f64>() / self.k as f64;
                    for (oj, xj) in o.iter_mut().zip(xi) {
                        *oj = xj - mean;
                    }
                }
                2 * x.len() as u64
            }
        }
    }

    /// Diagonal preconditioner `√σ` (logistic only).
    fn preconditioner(&self) -> Option<Vec<f64>> {
        match self.kind {
            LossKind::Squared => None,
            LossKind::Logistic => Some(
                self.sigma
                    .iter()
                    .map(|s| libm::sqrt(s.max(SOFTMAX_FLOOR)))
                    .collect(),
            ),
        }
    }
}

/// `out ← s ⊙ x` (copy when unscaled); returns scalar ops.
fn scale_into(s: Option<&[f64]>, x: &[f64], out: &mut [f64]) -> u64 {
    match s {
        Some(s) => {
            for ((o, xi), si) in out.iter_mut().zip(x).zip(s) {
                *o = xi * si;
            }
            x.len() as u64
        }
        None => {
            out.copy_from_slice(x);
            0
        }
    }
}

/// `d ↦ (J*HJ + λ I) d` with `λ = m/γ`.
struct PrimalOperator<'o, 'j> {
    jac: &'o JacobianOperator<'j>,
    curv: &'o Curvature,
    lambda: f64,
    jp: Vec<f64>,
    hjp: Vec<f64>,
    ops: u64,
}

impl CgOperator for PrimalOperator<'_, '_> {
    fn dim(&self) -> usize {
        self.jac.dims().p
    }

    fn curvature(&mut self, p: &[f64]) -> Result<f64> {
        self.jac.apply_into(p, &mut self.jp)?;
        self.ops += self.curv.hess(&self.jp, &mut self.hjp);
        self.ops += (self.jp.len() + p.len()) as u64;
        Ok(dot(&self.jp, &self.hjp) + self.lambda * dot(p, p))
    }

    fn apply_last(&mut self, p: &[f64], out: &mut [f64]) -> Result<()> {
        self.jac.adjoint_into(&self.hjp, out)?;
        axpy(self.lambda, p, out);
        self.ops += p.len() as u64;
        Ok(())
    }

    fn scalar_ops(&self) -> u64 {
        self.ops
    }
}

/// Primal Gauss-Newton direction: CG on `(J*HJ + (m/γ)I) d = J*g` from zero.
pub fn primal_gn_direction(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    spec: &SubproblemSpec,
) -> Result<DirectionResult> {
    spec.validate()?;
    if spec.path != SolvePath::Primal {
        return Err(Error::Parameter("primal solver called with a dual spec".into()));
    }
    check_shapes(jac, loss, f)?;
    let dims = jac.dims();
    let g = loss.grad(f)?;
    if g.as_slice().iter().all(|&x| x == 0.0) {
        return Ok(zero_direction(dims.p, None));
    }
    let rhs = jac.adjoint(&g)?;
    let curv = Curvature::new(loss.kind(), f);
    let mut op = PrimalOperator {
        jac,
        curv: &curv,
        lambda: dims.m as f64 / spec.gamma,
        jp: vec![0.0; dims.outputs()],
        hjp: vec![0.0; dims.outputs()],
        ops: 0,
    };
    let zero = vec![0.0; dims.p];
    let (d, report) = cg_run(&mut op, &rhs, &zero, spec.tau, spec.tol, &mut |_, _| {})?;
    let grad = divide(&rhs, dims.m);
    Ok(DirectionResult {
        descent_inner_product: dot(&d, &grad),
        d,
        alpha: None,
        report,
    })
}

fn zero_direction(p: usize, alpha: Option<OutputBlock>) -> DirectionResult {
    DirectionResult {
        d: vec![0.0; p],
        alpha,
        report: CgReport {
            residual_norms: vec![0.0],
            converged: true,
            ..CgReport::default()
        },
        descent_inner_product: 0.0,
    }
}

/// Factored dual operator `x̃ ↦ S P (H† + c JJ*) P S x̃` with `c = 1/μ`.
struct DualOperator<'o, 'j> {
    jac: &'o JacobianOperator<'j>,
    curv: &'o Curvature,
    scale: Option<&'o [f64]>,
    inv_mu: f64,
    tmp: Vec<f64>,
    /// `q = P S p̃`, the dual-space direction.
    q: Vec<f64>,
    hq: Vec<f64>,
    jt_q: Vec<f64>,
    /// `J* β` accumulated over the steps taken.
    jt_beta: Vec<f64>,
    ops: u64,
}

impl CgOperator for DualOperator<'_, '_> {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn curvature(&mut self, p: &[f64]) -> Result<f64> {
        self.ops += scale_into(self.scale, p, &mut self.tmp);
        self.ops += self.curv.project(&self.tmp, &mut self.q);
        self.ops += self.curv.pinv(&self.q, &mut self.hq);
        self.jac.adjoint_into(&self.q, &mut self.jt_q)?;
        self.ops += (self.q.len() + self.jt_q.len()) as u64;
        Ok(dot(&self.q, &self.hq) + self.inv_mu * dot(&self.jt_q, &self.jt_q))
    }

    fn apply_last(&mut self, _p: &[f64], out: &mut [f64]) -> Result<()> {
        self.jac.apply_into(&self.jt_q, &mut self.tmp)?;
        for (t, h) in self.tmp.iter_mut().zip(&self.hq) {
            *t = h + self.inv_mu * *t;
        }
        self.ops += self.tmp.len() as u64;
        self.ops += self.curv.project(&self.tmp, &mut self.q);
        self.ops += scale_into(self.scale, &self.q, out);
        Ok(())
    }

    fn step_taken(&mut self, a: f64) {
        axpy(a, &self.jt_q, &mut self.jt_beta);
        self.ops += self.jt_beta.len() as u64;
    }

    fn defers_apply(&self) -> bool {
        true
    }

    fn scalar_ops(&self) -> u64 {
        self.ops
    }
}

/// Dual Gauss-Newton direction from `β⁰ = 0`.
pub fn dual_gn_direction(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    spec: &SubproblemSpec,
) -> Result<DirectionResult> {
    dual_core(jac, loss, f, spec, None, &mut |_, _| {})
}

/// [`dual_gn_direction`] reporting every iterate `β^τ` (flattened `m × k`).
pub fn dual_gn_direction_observed(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    spec: &SubproblemSpec,
    observer: &mut dyn FnMut(usize, &[f64]),
) -> Result<DirectionResult> {
    dual_core(jac, loss, f, spec, None, observer)
}

/// Dual direction for the subproblem with an extra regularizer on `w − d`.
///
/// The conjugate of the regularized proximity term is replaced by its
/// quadratic model at zero, which is exact for `L2` and `None`. For `L1` it is
/// exact only while no coordinate sits in the shrinkage dead zone, so fixed
/// points of `w ← w − d` can differ from the Lasso optimum on sparse
/// solutions, by an amount that grows with `γ`. The direction
/// is `d = w − prox_{γρ}(w − (γ/m) J*α)`. With [`Regularizer::None`] this is
/// the plain dual solver.
pub fn regularized_dual_direction(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    spec: &SubproblemSpec,
    w: &[f64],
    reg: Regularizer,
) -> Result<DirectionResult> {
    reg.validate()?;
    check_len("parameters", jac.dims().p, w.len())?;
    let r = match reg {
        Regularizer::None => None,
        _ => Some((w, reg)),
    };
    dual_core(jac, loss, f, spec, r, &mut |_, _| {})
}

fn dual_core(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    spec: &SubproblemSpec,
    reg: Option<(&[f64], Regularizer)>,
    observer: &mut dyn FnMut(usize, &[f64]),
) -> Result<DirectionResult> {
    spec.validate()?;
    if spec.path != SolvePath::Dual {
        return Err(Error::Parameter("dual solver called with a primal spec".into()));
    }
    check_shapes(jac, loss, f)?;
    let dims = jac.dims();
    let (m, n) = (dims.m, dims.outputs());
    let gamma = spec.gamma;
    let g = loss.grad(f)?;
    if reg.is_none() && g.as_slice().iter().all(|&x| x == 0.0) {
        return Ok(zero_direction(dims.p, Some(g)));
    }
    let u = jac.adjoint(&g)?;
    let grad = divide(&u, m);
    let rule = reg.map_or(Regularizer::None, |(_, r)| r);
    let inv_mu = rule.inverse_modulus(gamma, m as f64);

    let curv = Curvature::new(loss.kind(), f);
    let scale = curv.preconditioner();
    let mut op = DualOperator {
        jac,
        curv: &curv,
        scale: scale.as_deref(),
        inv_mu,
        tmp: vec![0.0; n],
        q: vec![0.0; n],
        hq: vec![0.0; n],
        jt_q: vec![0.0; dims.p],
        jt_beta: vec![0.0; dims.p],
        ops: 0,
    };

    let mut beta = vec![0.0; n];
    let report = if spec.tau == 0 {
        observer(0, &beta);
        CgReport {
            final_residual_skipped: true,
            ..CgReport::default()
        }
    } else {
        // c̃ = S P J z with z = (1/μ) J*g + ∇r*(0)
        let mut z: Vec<f64> = u.iter().map(|x| inv_mu * x).collect();
        if let Some((w, r)) = reg {
            let pw = r.prox(w, gamma);
            for ((zi, wi), pi) in z.iter_mut().zip(w).zip(&pw) {
                *zi += wi - pi;
            }
        }
        let mut jz = vec![0.0; n];
        jac.apply_into(&z, &mut jz)?;
        let mut pc = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut setup_ops = dims.p as u64 + curv.project(&jz, &mut pc);
        setup_ops += scale_into(scale.as_deref(), &pc, &mut rhs);

        let zero = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let (xt, mut report) = cg_run(&mut op, &rhs, &zero, spec.tau, spec.tol, &mut |it, xt| {
            scale_into(scale.as_deref(), xt, &mut tmp);
            curv.project(&tmp, &mut beta);
            observer(it, &beta);
        })?;
        setup_ops += scale_into(scale.as_deref(), &xt, &mut tmp);
        setup_ops += curv.project(&tmp, &mut beta);
        report.vector_op_scalar_count += setup_ops;
        report
    };

    // J*α = J*g − J*β
    let jt_alpha: Vec<f64> = u.iter().zip(&op.jt_beta).map(|(a, b)| a - b).collect();
    let d: Vec<f64> = match reg {
        None => jt_alpha.iter().map(|x| gamma * (x / m as f64)).collect(),
        Some((w, r)) => {
            let shifted: Vec<f64> = w
                .iter()
                .zip(&jt_alpha)
                .map(|(wi, x)| wi - gamma * (x / m as f64))
                .collect();
            w.iter().zip(r.prox(&shifted, gamma)).map(|(wi, pi)| wi - pi).collect()
        }
    };
    let mut report = report;
    report.vector_op_scalar_count += 2 * dims.p as u64;
    let alpha: Vec<f64> = g.as_slice().iter().zip(&beta).map(|(a, b)| a - b).collect();
    Ok(DirectionResult {
        descent_inner_product: dot(&d, &grad),
        d,
        alpha: Some(OutputBlock::from_vec(m, dims.k, alpha)?),
        report,
    })
}

/// Primal or dual direction depending on `spec.path`.
pub fn gn_direction(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    spec: &SubproblemSpec,
) -> Result<DirectionResult> {
    match spec.path {
        SolvePath::Primal => primal_gn_direction(jac, loss, f, spec),
        SolvePath::Dual => dual_gn_direction(jac, loss, f, spec),
    }
}

/// Closed-form dual solution for one sample of a linear model under the
/// squared loss: `α = σ(f − y)/(1 + σ)` with `σ = 1/(γ‖x‖²)`, `d = γ vec(α xᵀ)`.
pub fn sdca_closed_form_squared(x: &[f64], f: &[f64], y: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("sdca target", f.len(), y.len())?;
    let residual: Vec<f64> = f.iter().zip(y).map(|(a, b)| a - b).collect();
    let xx = dot(x, x);
    if xx == 0.0 {
        return Ok((residual, vec![0.0; f.len() * x.len()]));
    }
    let sigma = 1.0 / (gamma * xx);
    let alpha: Vec<f64> = residual.iter().map(|r| sigma * r / (1.0 + sigma)).collect();
    let d = alpha
        .iter()
        .flat_map(|a| x.iter().map(move |xj| gamma * a * xj))
        .collect();
    Ok((alpha, d))
}

/// Value of the quadratic-free prox-linear objective
/// `Σ_i ℓ_i(f_i − J_i d) + (m/2γ)‖d‖²`.
pub fn primal_objective(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    gamma: f64,
    d: &[f64],
) -> Result<f64> {
    check_shapes(jac, loss, f)?;
    let jd = jac.apply(d)?;
    let shifted: Vec<f64> = f.as_slice().iter().zip(jd.as_slice()).map(|(a, b)| a - b).collect();
    let shifted = OutputBlock::from_vec(f.rows(), f.cols(), shifted)?;
    Ok(loss.sum_value(&shifted)? + jac.dims().m as f64 / (2.0 * gamma) * dot(d, d))
}

/// Value of the exact Fenchel dual
/// `Σ_i [ℓ_i*(α_i) − ⟨α_i, f_i⟩] + (γ/2m)‖J*α‖²`; `+∞` off the conjugate domain.
///
/// At optimality it equals minus [`primal_objective`].
pub fn dual_objective(
    jac: &JacobianOperator<'_>,
    loss: &BatchLoss<'_>,
    f: &OutputBlock,
    gamma: f64,
    alpha: &OutputBlock,
) -> Result<f64> {
    check_shapes(jac, loss, f)?;
    let mut total = 0.0;
    for i in 0..f.rows() {
        total += loss.oracle(i).conjugate_value(alpha.row(i))? - dot(alpha.row(i), f.row(i));
    }
    let jt = jac.adjoint(alpha)?;
    Ok(total + gamma / (2.0 * jac.dims().m as f64) * dot(&jt, &jt))
}
