//! Dense oracles shared by the integration tests.
#![allow(dead_code)]

use dualgn_core::losses::softmax;
use dualgn_core::models::synth_blobs;
use dualgn_core::{Batch, JacobianOperator, LossKind, ModelSpec, OutputBlock};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub model: ModelSpec,
    pub params: Vec<f64>,
    pub batch: Batch,
    pub kind: LossKind,
}

impl Instance {
    /// Seeded MLP instance on blob data with `k = 3` outputs.
    pub fn mlp(seed: u64, dims: &[usize], m: usize, kind: LossKind) -> Self {
        let model = ModelSpec::mlp(dims).unwrap();
        let params = model.init_params(seed);
        let k = model.output_dim();
        let data = synth_blobs(seed, m.max(k), model.input_dim(), k, 0.7).unwrap();
        let idx: Vec<usize> = (0..m).collect();
        let mut batch = data.batch(&idx).unwrap();
        if kind == LossKind::Squared {
            // Regression targets away from the one-hot corners.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for t in batch.targets.as_mut_slice() {
                *t += rng.random::<f64>() - 0.5;
            }
        }
        Instance { model, params, batch, kind }
    }

    pub fn linear(seed: u64, d: usize, k: usize, m: usize, kind: LossKind) -> Self {
        let model = ModelSpec::linear(d, k).unwrap();
        let params = model.init_params(seed);
        let data = synth_blobs(seed, m.max(k), d, k, 0.7).unwrap();
        let idx: Vec<usize> = (0..m).collect();
        Instance { model, params, batch: data.batch(&idx).unwrap(), kind }
    }

    pub fn outputs(&self) -> OutputBlock {
        self.model.forward_batch(&self.params, &self.batch.inputs).unwrap()
    }
}

/// Materializes `J` column by column from `p` JVPs.
pub fn dense_jacobian(jac: &JacobianOperator<'_>) -> DMatrix<f64> {
    let dims = jac.dims();
    let mut out = DMatrix::zeros(dims.outputs(), dims.p);
    for j in 0..dims.p {
        let mut e = vec![0.0; dims.p];
        e[j] = 1.0;
        let col = jac.apply(&e).unwrap();
        for (i, v) in col.as_slice().iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

/// Block-diagonal loss Hessian at `f`.
pub fn dense_hessian(kind: LossKind, f: &OutputBlock) -> DMatrix<f64> {
    let (m, k) = (f.rows(), f.cols());
    let mut h = DMatrix::zeros(m * k, m * k);
    for i in 0..m {
        let s = softmax(f.row(i));
        for a in 0..k {
            for b in 0..k {
                let eye = if a == b { 1.0 } else { 0.0 };
                h[(i * k + a, i * k + b)] = match kind {
                    LossKind::Squared => eye,
                    LossKind::Logistic => eye * s[a] - s[a] * s[b],
                };
            }
        }
    }
    h
}

/// Dense solve of `(JᵀHJ + (m/γ)I) d = Jᵀg`.
pub fn dense_gn_direction(jac: &JacobianOperator<'_>, kind: LossKind, f: &OutputBlock, g: &OutputBlock, gamma: f64) -> Vec<f64> {
    let dims = jac.dims();
    let jm = dense_jacobian(jac);
    let h = dense_hessian(kind, f);
    let lhs = jm.transpose() * h * &jm + DMatrix::identity(dims.p, dims.p) * (dims.m as f64 / gamma);
    let rhs = jm.transpose() * DVector::from_column_slice(g.as_slice());
    lhs.cholesky().unwrap().solve(&rhs).as_slice().to_vec()
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    a.transpose() * &a + DMatrix::identity(n, n) * shift
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

pub fn matvec(q: &DMatrix<f64>) -> impl FnMut(&[f64], &mut [f64]) -> dualgn_core::Result<()> + '_ {
    move |x, out| {
        let y = q * DVector::from_column_slice(x);
        out.copy_from_slice(y.as_slice());
        Ok(())
    }
}

/// Per-block zero-sum projector on blocks of size `k`.
pub fn zero_sum_blocks(k: usize) -> impl Fn(&[f64], &mut [f64]) {
    move |x, out| {
        for (o, xi) in out.chunks_exact_mut(k).zip(x.chunks_exact(k)) {
            let mean = xi.iter().sum::<f64>() / k as f64;
            o.iter_mut().zip(xi).for_each(|(oj, xj)| *oj = xj - mean);
        }
    }
}

/// Dense KKT solve of `min ½xᵀQx − cᵀx` s.t. `(I − P)x = 0` through the
/// saddle system `[Q, (I−P); (I−P), 0]` (least-squares, the block is rank
/// deficient when `P ≠ 0`).
pub fn dense_kkt(q: &DMatrix<f64>, c: &[f64], projector: &DMatrix<f64>) -> Vec<f64> {
    let n = q.nrows();
    let a = DMatrix::identity(n, n) - projector;
    let mut kkt = DMatrix::zeros(2 * n, 2 * n);
    kkt.view_mut((0, 0), (n, n)).copy_from(q);
    kkt.view_mut((0, n), (n, n)).copy_from(&a);
    kkt.view_mut((n, 0), (n, n)).copy_from(&a);
    let mut rhs = DVector::zeros(2 * n);
    rhs.rows_mut(0, n).copy_from(&DVector::from_column_slice(c));
    let sol = kkt.svd(true, true).solve(&rhs, 1e-12).unwrap();
    sol.rows(0, n).iter().copied().collect()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖a − b‖ / max(‖b‖, 1e-300)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-300)
}
