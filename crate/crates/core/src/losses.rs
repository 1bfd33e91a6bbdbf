//! Per-sample loss oracles.
//!
//! Both losses are convex in the network output `f ∈ ℝ^k`:
//!
//! - squared: `ℓ(f) = ½‖f − y‖²`, `∇ℓ = f − y`, `∇²ℓ = I`.
//! - logistic: `ℓ(f) = LSE(f) − ⟨f, y⟩` with one-hot `y`, `∇ℓ = σ(f) − y`,
//!   `∇²ℓ = diag(σ) − σσᵀ` where `σ` is the softmax.
//!
//! The logistic Hessian is singular along `1`, so the quadratic dual works on
//! the zero-sum subspace where the pseudo-inverse acts as division by `σ`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{check_finite, check_len, Error, Result};
use crate::linop::OutputBlock;

/// Lower clamp applied to softmax entries before dividing by them.
pub const SOFTMAX_FLOOR: f64 = 1e-12;

/// Tolerance on `1ᵀμ = 1` and `μ ≥ 0` when testing simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Tolerance on `1ᵀβ = 0`, scaled by `1 + ‖β‖₁`.
pub const ZERO_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    Logistic,
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|x| libm::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(f.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

#[derive(Debug, Clone, Copy)]
pub struct LossOracle<'a> {
    kind: LossKind,
    target: &'a [f64],
}

impl<'a> LossOracle<'a> {
    pub fn new(kind: LossKind, target: &'a [f64]) -> Result<Self> {
        check_finite("loss target", target)?;
        if kind == LossKind::Logistic {
            let ones = target.iter().filter(|&&t| t == 1.0).count();
            let zeros = target.iter().filter(|&&t| t == 0.0).count();
            if ones != 1 || ones + zeros != target.len() {
                return Err(Error::Parameter("logistic target must be one-hot".into()));
            }
        }
        Ok(LossOracle { kind, target })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn target(&self) -> &[f64] {
        self.target
    }

    fn check(&self, what: &'static str, v: &[f64]) -> Result<()> {
        check_len(what, self.target.len(), v.len())?;
        check_finite(what, v)
    }

    pub fn value(&self, f: &[f64]) -> Result<f64> {
        self.check("loss input", f)?;
        Ok(match self.kind {
            LossKind::Squared => {
                0.5 * f
                    .iter()
                    .zip(self.target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            LossKind::Logistic => {
                log_sum_exp(f) - f.iter().zip(self.target).map(|(a, b)| a * b).sum::<f64>()
            }
        })
    }

    pub fn grad(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check("loss input", f)?;
        Ok(match self.kind {
            LossKind::Squared => f.iter().zip(self.target).map(|(a, b)| a - b).collect(),
            LossKind::Logistic => softmax(f)
                .into_iter()
                .zip(self.target)
                .map(|(s, y)| s - y)
                .collect(),
        })
    }

    /// `∇²ℓ(f) v`.
    pub fn hvp(&self, f: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check("loss input", f)?;
        self.check("hvp direction", v)?;
        Ok(match self.kind {
            LossKind::Squared => v.to_vec(),
            LossKind::Logistic => {
                let s = softmax(f);
                let sv: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
                s.iter().zip(v).map(|(si, vi)| si * vi - sv * si).collect()
            }
        })
    }

    /// Pseudo-inverse Hessian product `H†β` on the conjugate domain.
    ///
    /// Squared: `β`. Logistic: `β / max(σ, SOFTMAX_FLOOR)` element-wise, which
    /// requires `1ᵀβ = 0`.
    pub fn quad_conj_apply(&self, f: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        self.check("loss input", f)?;
        self.check("conjugate argument", beta)?;
        match self.kind {
            LossKind::Squared => Ok(beta.to_vec()),
            LossKind::Logistic => {
                let total: f64 = beta.iter().sum();
                let scale: f64 = 1.0 + beta.iter().map(|b| b.abs()).sum::<f64>();
                if total.abs() > ZERO_SUM_TOL * scale {
                    return Err(Error::Domain(format!(
                        "logistic pseudo-inverse needs 1ᵀβ = 0, got {total:e}"
                    )));
                }
                Ok(softmax(f)
                    .into_iter()
                    .zip(beta)
                    .map(|(s, b)| b / s.max(SOFTMAX_FLOOR))
                    .collect())
            }
        }
    }

    /// Orthogonal projector onto the feasible set of the quadratic dual.
    pub fn constraint_project(&self, beta: &[f64]) -> Vec<f64> {
        match self.kind {
            LossKind::Squared => beta.to_vec(),
            LossKind::Logistic => {
                let mean = beta.iter().sum::<f64>() / beta.len() as f64;
                beta.iter().map(|b| b - mean).collect()
            }
        }
    }

    /// `ℓ*(α)`; `+∞` outside the domain.
    pub fn conjugate_value(&self, alpha: &[f64]) -> Result<f64> {
        self.check("conjugate argument", alpha)?;
        Ok(match self.kind {
            LossKind::Squared => alpha
                .iter()
                .zip(self.target)
                .map(|(a, y)| 0.5 * a * a + a * y)
                .sum(),
            LossKind::Logistic => {
                let mu: Vec<f64> = alpha.iter().zip(self.target).map(|(a, y)| a + y).collect();
                let total: f64 = mu.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL || mu.iter().any(|&m| m < -SIMPLEX_TOL) {
                    return Ok(f64::INFINITY);
                }
                mu.iter()
                    .map(|&m| if m > 0.0 { m * libm::log(m) } else { 0.0 })
                    .sum()
            }
        })
    }
}

/// Loss oracles for every row of a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss<'a> {
    kind: LossKind,
    targets: &'a OutputBlock,
}

impl<'a> BatchLoss<'a> {
    pub fn new(kind: LossKind, targets: &'a OutputBlock) -> Result<Self> {
        for row in targets.iter_rows() {
            LossOracle::new(kind, row)?;
        }
        Ok(BatchLoss { kind, targets })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn targets(&self) -> &OutputBlock {
        self.targets
    }

    pub fn oracle(&self, i: usize) -> LossOracle<'a> {
        LossOracle {
            kind: self.kind,
            target: self.targets.row(i),
        }
    }

    fn check_block(&self, what: &'static str, f: &OutputBlock) -> Result<()> {
        check_len(what, self.targets.rows(), f.rows())?;
        check_len(what, self.targets.cols(), f.cols())
    }

    /// `ℓ_S(f) = Σ_i ℓ_i(f_i)`.
    pub fn sum_value(&self, f: &OutputBlock) -> Result<f64> {
        self.check_block("batch outputs", f)?;
        let mut total = 0.0;
        for (i, row) in f.iter_rows().enumerate() {
            total += self.oracle(i).value(row)?;
        }
        Ok(total)
    }

    /// `h_S = ℓ_S(f) / m`.
    pub fn mean_value(&self, f: &OutputBlock) -> Result<f64> {
        Ok(self.sum_value(f)? / f.rows() as f64)
    }

    /// Per-sample gradients `g_S`.
    pub fn grad(&self, f: &OutputBlock) -> Result<OutputBlock> {
        self.check_block("batch outputs", f)?;
        self.map_rows(f, |o, fi| o.grad(fi))
    }

    pub fn hvp(&self, f: &OutputBlock, v: &[f64]) -> Result<Vec<f64>> {
        self.check_block("batch outputs", f)?;
        let k = f.cols();
        let mut out = Vec::with_capacity(v.len());
        for (i, (fi, vi)) in f.iter_rows().zip(v.chunks_exact(k)).enumerate() {
            out.extend(self.oracle(i).hvp(fi, vi)?);
        }
        Ok(out)
    }

    fn map_rows<F>(&self, f: &OutputBlock, op: F) -> Result<OutputBlock>
    where
        F: Fn(&LossOracle<'a>, &[f64]) -> Result<Vec<f64>>,
    {
        let mut data = Vec::with_capacity(f.rows() * f.cols());
        for (i, row) in f.iter_rows().enumerate() {
            data.extend(op(&self.oracle(i), row)?);
        }
        OutputBlock::from_vec(f.rows(), f.cols(), data)
    }
}
