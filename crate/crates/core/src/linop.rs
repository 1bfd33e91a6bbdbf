//! Matrix-free Jacobian operators over a mini-batch.
//!
//! A [`JacobianOperator`] is the pair `u ↦ J_S u` (JVP, parameters to outputs)
//! and `v ↦ J_S* v` (VJP, outputs to parameters) for a frozen
//! `(model, params, batch)` triple. Batched products are computed sample by
//! sample and the VJP sums per-sample cotangents in batch order, so results
//! are bit-reproducible.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_finite, check_len, Error, Result};
use crate::models::{Batch, ModelSpec};
use crate::rng;
use crate::vecops::dot;

/// Row-major `m × k` block of reals (outputs, tangents, residuals, duals).
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBlock {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl OutputBlock {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        OutputBlock {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("output block", rows * cols, data.len())?;
        Ok(OutputBlock { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }
}

/// Shape of a Jacobian operator: `p` parameters, `m` samples, `k` outputs each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub p: usize,
    pub m: usize,
    pub k: usize,
}

impl Dims {
    pub fn outputs(&self) -> usize {
        self.m * self.k
    }
}

type MapFn<'a> = Box<dyn Fn(&[f64], &mut [f64]) -> Result<()> + 'a>;

pub struct JacobianOperator<'a> {
    dims: Dims,
    apply: MapFn<'a>,
    adjoint: MapFn<'a>,
    jvp_calls: AtomicUsize,
    vjp_calls: AtomicUsize,
}

impl core::fmt::Debug for JacobianOperator<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("JacobianOperator")
            .field("dims", &self.dims)
            .field("jvp_calls", &self.jvp_calls())
            .field("vjp_calls", &self.vjp_calls())
            .finish()
    }
}

impl<'a> JacobianOperator<'a> {
    /// Wraps an arbitrary linear pair. `apply` writes `m·k` outputs, `adjoint`
    /// overwrites a length-`p` buffer. The caller is responsible for the pair
    /// being adjoint; [`adjoint_dot_test`] checks it.
    pub fn from_fns<A, B>(dims: Dims, apply: A, adjoint: B) -> Self
    where
        A: Fn(&[f64], &mut [f64]) -> Result<()> + 'a,
        B: Fn(&[f64], &mut [f64]) -> Result<()> + 'a,
    {
        JacobianOperator {
            dims,
            apply: Box::new(apply),
            adjoint: Box::new(adjoint),
            jvp_calls: AtomicUsize::new(0),
            vjp_calls: AtomicUsize::new(0),
        }
    }

    /// Operator of an explicit row-major `(m·k) × p` matrix.
    pub fn from_matrix(dims: Dims, matrix: &'a [f64]) -> Result<Self> {
        check_len("jacobian matrix", dims.outputs() * dims.p, matrix.len())?;
        let p = dims.p;
        Ok(Self::from_fns(
            dims,
            move |u, out| {
                for (o, row) in out.iter_mut().zip(matrix.chunks_exact(p)) {
                    *o = dot(row, u);
                }
                Ok(())
            },
            move |v, out| {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (vi, row) in v.iter().zip(matrix.chunks_exact(p)) {
                    for (o, r) in out.iter_mut().zip(row) {
                        *o += vi * r;
                    }
                }
                Ok(())
            },
        ))
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn jvp_calls(&self) -> usize {
        self.jvp_calls.load(Ordering::Relaxed)
    }

    pub fn vjp_calls(&self) -> usize {
        self.vjp_calls.load(Ordering::Relaxed)
    }

    /// `out ← J u`.
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        check_len("jvp tangent", self.dims.p, u.len())?;
        check_len("jvp output", self.dims.outputs(), out.len())?;
        check_finite("jvp tangent", u)?;
        self.jvp_calls.fetch_add(1, Ordering::Relaxed);
        (self.apply)(u, out)
    }

    /// `out ← J* v`.
    pub fn adjoint_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        check_len("vjp cotangent", self.dims.outputs(), v.len())?;
        check_len("vjp output", self.dims.p, out.len())?;
        check_finite("vjp cotangent", v)?;
        self.vjp_calls.fetch_add(1, Ordering::Relaxed);
        (self.adjoint)(v, out)
    }

    pub fn apply(&self, u: &[f64]) -> Result<OutputBlock> {
        let mut out = OutputBlock::zeros(self.dims.m, self.dims.k);
        self.apply_into(u, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn adjoint(&self, v: &OutputBlock) -> Result<Vec<f64>> {
        if v.rows() != self.dims.m || v.cols() != self.dims.k {
            return Err(Error::Shape {
                what: "vjp cotangent block",
                expected: self.dims.outputs(),
                got: v.rows() * v.cols(),
            });
        }
        let mut out = vec![0.0; self.dims.p];
        self.adjoint_into(v.as_slice(), &mut out)?;
        Ok(out)
    }
}

/// Binds `model` at `params` to a batch.
pub fn make_jacobian_operator<'a>(
    model: &'a ModelSpec,
    params: &'a [f64],
    batch: &'a Batch,
) -> Result<JacobianOperator<'a>> {
    check_len("model parameters", model.num_params(), params.len())?;
    check_len("batch input dim", model.input_dim(), batch.input_dim)?;
    if batch.is_empty() {
        return Err(Error::Parameter("batch must be nonempty".into()));
    }
    let k = model.output_dim();
    let dims = Dims {
        p: model.num_params(),
        m: batch.len(),
        k,
    };
    Ok(JacobianOperator::from_fns(
        dims,
        move |u, out| {
            for (j, o) in out.chunks_exact_mut(k).enumerate() {
                o.copy_from_slice(&model.jvp(params, batch.input(j), u)?);
            }
            Ok(())
        },
        move |v, out| {
            out.iter_mut().for_each(|o| *o = 0.0);
            for (j, vj) in v.chunks_exact(k).enumerate() {
                model.vjp_accumulate(params, batch.input(j), vj, out)?;
            }
            Ok(())
        },
    ))
}

/// `J_S u`, stacked row-wise.
pub fn jvp_apply(op: &JacobianOperator<'_>, u: &[f64]) -> Result<OutputBlock> {
    op.apply(u)
}

/// `Σ_j J_j* v_j`.
pub fn vjp_apply(op: &JacobianOperator<'_>, v: &OutputBlock) -> Result<Vec<f64>> {
    op.adjoint(v)
}

/// Max over `trials` Gaussian pairs `(u, v)` of
/// `|⟨Ju, v⟩ − ⟨u, J*v⟩| / (1 + |⟨Ju, v⟩|)`.
pub fn adjoint_dot_test(op: &JacobianOperator<'_>, seed: u64, trials: usize) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Parameter("adjoint test needs at least one trial".into()));
    }
    let dims = op.dims();
    let mut worst: f64 = 0.0;
    let mut ju = vec![0.0; dims.outputs()];
    let mut jtv = vec![0.0; dims.p];
    for t in 0..trials {
        let mut rng = rng::stream(seed, rng::STREAM_CHECK, t as u64);
        let u: Vec<f64> = (0..dims.p).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..dims.outputs()).map(|_| rng.sample(StandardNormal)).collect();
        op.apply_into(&u, &mut ju)?;
        op.adjoint_into(&v, &mut jtv)?;
        let lhs = dot(&ju, &v);
        let rhs = dot(&u, &jtv);
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    Ok(worst)
}

/// Central difference `(f(w + εu) − f(w − εu)) / 2ε` of an arbitrary map.
pub fn finite_diff_jvp_fn<F>(f: F, w: &[f64], u: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter("finite-difference step must be > 0".into()));
    }
    check_len("finite-difference tangent", w.len(), u.len())?;
    let shifted = |sign: f64| -> Vec<f64> { w.iter().zip(u).map(|(wi, ui)| wi + sign * eps * ui).collect() };
    let plus = f(&shifted(1.0))?;
    let minus = f(&shifted(-1.0))?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect())
}

/// Central-difference oracle for `J_S u` on a model and batch.
pub fn finite_diff_jvp(
    model: &ModelSpec,
    params: &[f64],
    batch: &Batch,
    u: &[f64],
    eps: f64,
) -> Result<OutputBlock> {
    check_len("model parameters", model.num_params(), params.len())?;
    let data = finite_diff_jvp_fn(
        |w| Ok(model.forward_batch(w, &batch.inputs)?.into_vec()),
        params,
        u,
        eps,
    )?;
    OutputBlock::from_vec(batch.len(), model.output_dim(), data)
}
