//! Differentiable model zoo with hand-written forward, JVP and VJP.
//!
//! Parameters are flattened layer by layer; within a layer the weight
//! matrix comes first (row-major, `out × in`), followed by the bias. The
//! linear model `f(W) = W x` has no bias, so `p = k · d`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_finite, check_len, Error, Result};
use crate::linop::OutputBlock;
use crate::rng;

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// `f(W) = W x` with `W ∈ ℝ^{outputs × inputs}`.
    Linear { inputs: usize, outputs: usize },
    /// Affine layers with SiLU between them; `dims = [in, hidden.., out]`.
    Mlp { dims: Vec<usize> },
}

impl ModelSpec {
    pub fn linear(inputs: usize, outputs: usize) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Parameter("linear model dims must be >= 1".into()));
        }
        Ok(ModelSpec::Linear { inputs, outputs })
    }

    pub fn mlp(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Parameter(
                "mlp needs at least an input and an output dim".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::Parameter("mlp layer dims must be >= 1".into()));
        }
        Ok(ModelSpec::Mlp {
            dims: dims.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Linear { inputs, .. } => *inputs,
            ModelSpec::Mlp { dims } => dims[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ModelSpec::Linear { outputs, .. } => *outputs,
            ModelSpec::Mlp { dims } => dims[dims.len() - 1],
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ModelSpec::Linear { inputs, outputs } => inputs * outputs,
            ModelSpec::Mlp { dims } => dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum(),
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        check_len("model parameters", self.num_params(), params.len())
    }

    /// Uniform `(-a, a)` per layer with `a = 1/√fan_in`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, rng::STREAM_INIT, 0);
        let mut params = Vec::with_capacity(self.num_params());
        let mut fill = |count: usize, fan_in: usize, params: &mut Vec<f64>| {
            let a = 1.0 / libm::sqrt(fan_in as f64);
            for _ in 0..count {
                let u: f64 = rng.random();
                params.push(a * (2.0 * u - 1.0));
            }
        };
        match self {
            ModelSpec::Linear { inputs, outputs } => fill(inputs * outputs, *inputs, &mut params),
            ModelSpec::Mlp { dims } => {
                for w in dims.windows(2) {
                    fill(w[1] * w[0], w[0], &mut params);
                    fill(w[1], w[0], &mut params);
                }
            }
        }
        params
    }

    /// Network output for a single input `x`.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        check_len("model input", self.input_dim(), x.len())?;
        let mut out = vec![0.0; self.output_dim()];
        match self {
            ModelSpec::Linear { inputs, .. } => matvec(params, *inputs, x, &mut out),
            ModelSpec::Mlp { dims } => {
                let mut h = x.to_vec();
                let mut offset = 0;
                for (l, w) in dims.windows(2).enumerate() {
                    let (n_in, n_out) = (w[0], w[1]);
                    let (weights, bias) = layer(params, offset, n_in, n_out);
                    offset += n_out * n_in + n_out;
                    let mut z = bias.to_vec();
                    matvec_acc(weights, n_in, &h, &mut z);
                    if l + 2 == dims.len() {
                        out.copy_from_slice(&z);
                    } else {
                        h = z.into_iter().map(silu).collect();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Tangent `J(w) u` of the output at input `x`.
    pub fn jvp(&self, params: &[f64], x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        check_len("model input", self.input_dim(), x.len())?;
        check_len("tangent", self.num_params(), u.len())?;
        let mut out = vec![0.0; self.output_dim()];
        match self {
            ModelSpec::Linear { inputs, .. } => matvec(u, *inputs, x, &mut out),
            ModelSpec::Mlp { dims } => {
                let mut h = x.to_vec();
                let mut h_dot = vec![0.0; x.len()];
                let mut offset = 0;
                for (l, w) in dims.windows(2).enumerate() {
                    let (n_in, n_out) = (w[0], w[1]);
                    let (weights, bias) = layer(params, offset, n_in, n_out);
                    let (weights_dot, bias_dot) = layer(u, offset, n_in, n_out);
                    offset += n_out * n_in + n_out;
                    let mut z = bias.to_vec();
                    matvec_acc(weights, n_in, &h, &mut z);
                    let mut z_dot = bias_dot.to_vec();
                    matvec_acc(weights_dot, n_in, &h, &mut z_dot);
                    matvec_acc(weights, n_in, &h_dot, &mut z_dot);
                    if l + 2 == dims.len() {
                        out.copy_from_slice(&z_dot);
                    } else {
                        h_dot = z.iter().zip(&z_dot).map(|(z, zd)| silu_prime(*z) * zd).collect();
                        h = z.into_iter().map(silu).collect();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Cotangent `J(w)* v` at input `x`.
    pub fn vjp(&self, params: &[f64], x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_params()];
        self.vjp_accumulate(params, x, v, &mut out)?;
        Ok(out)
    }

    /// Adds `J(w)* v` into `acc`.
    pub fn vjp_accumulate(&self, params: &[f64], x: &[f64], v: &[f64], acc: &mut [f64]) -> Result<()> {
        self.check_params(params)?;
        check_len("model input", self.input_dim(), x.len())?;
        check_len("cotangent", self.output_dim(), v.len())?;
        check_len("cotangent accumulator", self.num_params(), acc.len())?;
        match self {
            ModelSpec::Linear { inputs, outputs } => {
                for i in 0..*outputs {
                    let row = &mut acc[i * inputs..(i + 1) * inputs];
                    for (r, xj) in row.iter_mut().zip(x) {
                        *r += v[i] * xj;
                    }
                }
            }
            ModelSpec::Mlp { dims } => {
                let n_layers = dims.len() - 1;
                // Forward pass keeping layer inputs and pre-activations.
                let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
                let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
                let mut offsets = Vec::with_capacity(n_layers);
                let mut h = x.to_vec();
                let mut offset = 0;
                for w in dims.windows(2) {
                    let (n_in, n_out) = (w[0], w[1]);
                    let (weights, bias) = layer(params, offset, n_in, n_out);
                    offsets.push(offset);
                    offset += n_out * n_in + n_out;
                    let mut z = bias.to_vec();
                    matvec_acc(weights, n_in, &h, &mut z);
                    let next = z.iter().copied().map(silu).collect();
                    inputs.push(core::mem::replace(&mut h, next));
                    pre.push(z);
                }
                let mut delta = v.to_vec();
                for l in (0..n_layers).rev() {
                    let (n_in, n_out) = (dims[l], dims[l + 1]);
                    let off = offsets[l];
                    let h_in = &inputs[l];
                    for i in 0..n_out {
                        let row = &mut acc[off + i * n_in..off + (i + 1) * n_in];
                        for (r, hj) in row.iter_mut().zip(h_in) {
                            *r += delta[i] * hj;
                        }
                    }
                    let bias_off = off + n_out * n_in;
                    for (b, d) in acc[bias_off..bias_off + n_out].iter_mut().zip(&delta) {
                        *b += d;
                    }
                    if l > 0 {
                        let (weights, _) = layer(params, off, n_in, n_out);
                        let mut prev = vec![0.0; n_in];
                        for i in 0..n_out {
                            let row = &weights[i * n_in..(i + 1) * n_in];
                            for (p, wij) in prev.iter_mut().zip(row) {
                                *p += wij * delta[i];
                            }
                        }
                        for (p, z) in prev.iter_mut().zip(&pre[l - 1]) {
                            *p *= silu_prime(*z);
                        }
                        delta = prev;
                    }
                }
            }
        }
        Ok(())
    }

    /// Outputs for every row of a batch, stacked as an `m × k` block.
    pub fn forward_batch(&self, params: &[f64], inputs: &[f64]) -> Result<OutputBlock> {
        let d = self.input_dim();
        if inputs.is_empty() || !inputs.len().is_multiple_of(d) {
            return Err(Error::Shape {
                what: "batch inputs",
                expected: d,
                got: inputs.len(),
            });
        }
        let m = inputs.len() / d;
        let k = self.output_dim();
        let mut data = Vec::with_capacity(m * k);
        for x in inputs.chunks_exact(d) {
            data.extend(self.forward(params, x)?);
        }
        OutputBlock::from_vec(m, k, data)
    }
}

fn layer(params: &[f64], offset: usize, n_in: usize, n_out: usize) -> (&[f64], &[f64]) {
    let w_end = offset + n_out * n_in;
    (&params[offset..w_end], &params[w_end..w_end + n_out])
}

fn matvec(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    matvec_acc(a, cols, x, out);
}

fn matvec_acc(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(a.chunks_exact(cols)) {
        *o += row.iter().zip(x).fold(0.0, |acc, (r, xj)| acc + r * xj);
    }
}

/// A gathered mini-batch: `m` input rows and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: OutputBlock,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, targets: OutputBlock) -> Result<Self> {
        if input_dim == 0 || targets.rows() == 0 {
            return Err(Error::Parameter("batch must be nonempty".into()));
        }
        check_len("batch inputs", targets.rows() * input_dim, inputs.len())?;
        check_finite("batch inputs", &inputs)?;
        Ok(Batch {
            inputs,
            input_dim,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: OutputBlock,
    pub seed: u64,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, input_dim: usize, targets: OutputBlock, seed: u64) -> Result<Self> {
        let batch = Batch::new(inputs, input_dim, targets)?;
        Ok(Dataset {
            inputs: batch.inputs,
            input_dim,
            targets: batch.targets,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let k = self.output_dim();
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut targets = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Parameter("batch index out of range".into()));
            }
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.targets.row(i));
        }
        Batch::new(inputs, self.input_dim, OutputBlock::from_vec(indices.len(), k, targets)?)
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            input_dim: self.input_dim,
            targets: self.targets.clone(),
        }
    }
}

/// `k` Gaussian clusters around fixed centers.
///
/// For `d >= 2` the class-`j` center is `(cos 2πj/k, sin 2πj/k, 0, …)`; for
/// `d = 1` centers are evenly spaced on `[-1, 1]`. Sample `i` belongs to class
/// `i mod k` and is drawn as `center + spread · N(0, I)` from the data stream of
/// [`crate::rng`]. Targets are one-hot.
pub fn synth_blobs(seed: u64, n: usize, d: usize, k: usize, spread: f64) -> Result<Dataset> {
    if d == 0 || k == 0 {
        return Err(Error::Parameter("blobs need d >= 1 and k >= 1".into()));
    }
    if n < k {
        return Err(Error::Parameter("blobs need n >= k".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Parameter("blob spread must be > 0".into()));
    }
    let mut centers = vec![0.0; k * d];
    for j in 0..k {
        let c = &mut centers[j * d..(j + 1) * d];
        if d >= 2 {
            let angle = 2.0 * core::f64::consts::PI * j as f64 / k as f64;
            c[0] = libm::cos(angle);
            c[1] = libm::sin(angle);
        } else if k > 1 {
            c[0] = -1.0 + 2.0 * j as f64 / (k - 1) as f64;
        }
    }
    let mut rng = rng::stream(seed, rng::STREAM_DATA, 0);
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets = vec![0.0; n * k];
    for i in 0..n {
        let class = i % k;
        for c in &centers[class * d..(class + 1) * d] {
            let z: f64 = rng.sample(StandardNormal);
            inputs.push(c + spread * z);
        }
        targets[i * k + class] = 1.0;
    }
    Dataset::new(inputs, d, OutputBlock::from_vec(n, k, targets)?, seed)
}
