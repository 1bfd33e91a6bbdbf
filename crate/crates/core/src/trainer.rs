//! Outer training loops.
//!
//! Three families of update are supported:
//!
//! - `spl`: `w ← w − d` with `d` the prox-linear direction at regularization `γ`.
//! - `armijo_spl`: `w ← w − η d` with `η` from a backtracking Armijo search on the batch.
//! - `sgd`, `momentum`, `adam`: the usual rules, fed either the batch gradient or
//!   the prox-linear direction in its place.
//!
//! [`Trainer`] exposes the loop one step at a time so callers can stream
//! records; [`train`] drives it to completion.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::directions::{
    batch_gradient, gn_direction, regularized_dual_direction, Regularizer, SolvePath, SubproblemSpec,
};
use crate::error::{check_len, Error, Result};
use crate::linop::{make_jacobian_operator, OutputBlock};
use crate::losses::{BatchLoss, LossKind};
use crate::models::{Dataset, ModelSpec};
use crate::rng;
use crate::vecops::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Spl,
    ArmijoSpl,
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionSource {
    Gradient,
    ProxLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoParams {
    pub beta: f64,
    pub shrink: f64,
    pub eta0: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        ArmijoParams {
            beta: 1e-4,
            shrink: 0.5,
            eta0: 1.0,
            max_backtracks: 30,
        }
    }
}

impl ArmijoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Parameter("armijo beta must lie in (0, 1)".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Parameter("armijo shrink must lie in (0, 1)".into()));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Parameter("armijo eta0 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    /// Momentum coefficient.
    pub mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            mu: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub direction: DirectionSource,
    pub path: SolvePath,
    pub loss: LossKind,
    pub model: ModelSpec,
    pub gamma: f64,
    pub tau: usize,
    pub tol: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of steps.
    pub steps: Option<usize>,
    pub eta: f64,
    pub armijo: ArmijoParams,
    pub hyper: Hyper,
    pub seed: u64,
    pub reg: Regularizer,
}

impl TrainConfig {
    /// Armijo-SPL with `γ = 1`, `τ = 2` and the dual path.
    pub fn new(model: ModelSpec, loss: LossKind) -> Self {
        TrainConfig {
            method: Method::ArmijoSpl,
            direction: DirectionSource::ProxLinear,
            path: SolvePath::Dual,
            loss,
            model,
            gamma: 1.0,
            tau: 2,
            tol: crate::cg::DEFAULT_TOL,
            batch_size: 32,
            epochs: 1,
            steps: None,
            eta: 1.0,
            armijo: ArmijoParams::default(),
            hyper: Hyper::default(),
            seed: 0,
            reg: Regularizer::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SubproblemSpec::new(self.gamma, self.tau, self.path)?.with_tol(self.tol).validate()?;
        self.armijo.validate()?;
        self.reg.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Parameter("eta must be positive and finite".into()));
        }
        if self.reg != Regularizer::None
            && (self.method != Method::Spl
                || self.path != SolvePath::Dual
                || self.direction != DirectionSource::ProxLinear)
        {
            return Err(Error::Parameter(
                "l1/l2 regularization needs method spl with prox-linear dual directions".into(),
            ));
        }
        let h = &self.hyper;
        if !(0.0..1.0).contains(&h.mu) || !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) || !(h.eps > 0.0) {
            return Err(Error::Parameter("optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }

    fn subproblem(&self) -> SubproblemSpec {
        SubproblemSpec {
            gamma: self.gamma,
            tau: self.tau,
            path: self.path,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(p: usize) -> Self {
        OptimizerState {
            velocity: vec![0.0; p],
            first_moment: vec![0.0; p],
            second_moment: vec![0.0; p],
            step: 0,
        }
    }
}

/// Applies one step of `rule` with `dir` in place of the gradient.
pub fn outer_update(
    rule: UpdateRule,
    state: &mut OptimizerState,
    w: &mut [f64],
    dir: &[f64],
    eta: f64,
    hyper: &Hyper,
) -> Result<()> {
    let p = w.len();
    check_len("update direction", p, dir.len())?;
    check_len("momentum buffer", p, state.velocity.len())?;
    check_len("adam first moment", p, state.first_moment.len())?;
    check_len("adam second moment", p, state.second_moment.len())?;
    state.step += 1;
    match rule {
        UpdateRule::Sgd => {
            for (wi, di) in w.iter_mut().zip(dir) {
                *wi -= eta * di;
            }
        }
        UpdateRule::Momentum => {
            for ((wi, vi), di) in w.iter_mut().zip(&mut state.velocity).zip(dir) {
                *vi = hyper.mu * *vi + di;
                *wi -= eta * *vi;
            }
        }
        UpdateRule::Adam => {
            let t = state.step as f64;
            let c1 = 1.0 - libm::pow(hyper.beta1, t);
            let c2 = 1.0 - libm::pow(hyper.beta2, t);
            for (((wi, m1), m2), di) in w
                .iter_mut()
                .zip(&mut state.first_moment)
                .zip(&mut state.second_moment)
                .zip(dir)
            {
                *m1 = hyper.beta1 * *m1 + (1.0 - hyper.beta1) * di;
                *m2 = hyper.beta2 * *m2 + (1.0 - hyper.beta2) * di * di;
                *wi -= eta * (*m1 / c1) / (libm::sqrt(*m2 / c2) + hyper.eps);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoOutcome {
    pub eta: f64,
    pub accepted: bool,
    pub backtracks: usize,
    /// `h(w)`.
    pub h0: f64,
    /// `h(w − η d)` at the returned `η`.
    pub h_new: f64,
    /// `⟨d, g⟩`.
    pub slope: f64,
}

impl ArmijoOutcome {
    /// Re-checks the sufficient-decrease inequality on the stored values.
    pub fn satisfies(&self, beta: f64) -> bool {
        self.h_new <= self.h0 - beta * self.eta * self.slope
    }
}

/// Backtracking search for the largest `η ∈ {η₀ sʲ}` with
/// `h(w − η d) ≤ h(w) − β η ⟨d, g⟩`.
///
/// When no trial passes the smallest one is returned with `accepted = false`.
pub fn armijo_search<H>(h: H, w: &[f64], d: &[f64], g: &[f64], params: &ArmijoParams) -> Result<ArmijoOutcome>
where
    H: FnMut(&[f64]) -> Result<f64>,
{
    check_len("armijo gradient", d.len(), g.len())?;
    let slope = dot(d, g);
    let scale = 1.0 + norm(d) * norm(g);
    armijo_search_with_slope(h, w, d, slope, scale, params)
}

fn armijo_search_with_slope<H>(
    mut h: H,
    w: &[f64],
    d: &[f64],
    slope: f64,
    scale: f64,
    params: &ArmijoParams,
) -> Result<ArmijoOutcome>
where
    H: FnMut(&[f64]) -> Result<f64>,
{
    params.validate()?;
    check_len("armijo direction", w.len(), d.len())?;
    if slope < -1e-10 * scale {
        return Err(Error::Contract(alloc::format!(
            "armijo search needs a descent direction, ⟨d, g⟩ = {slope:e}"
        )));
    }
    let h0 = h(w)?;
    let mut trial = vec![0.0; w.len()];
    let mut eta = params.eta0;
    let mut h_new = f64::NAN;
    for j in 0..=params.max_backtracks {
        if j > 0 {
            eta *= params.shrink;
        }
        for ((t, wi), di) in trial.iter_mut().zip(w).zip(d) {
            *t = wi - eta * di;
        }
        h_new = h(&trial)?;
        if h_new <= h0 - params.beta * eta * slope {
            return Ok(ArmijoOutcome {
                eta,
                accepted: true,
                backtracks: j,
                h0,
                h_new,
                slope,
            });
        }
    }
    Ok(ArmijoOutcome {
        eta,
        accepted: false,
        backtracks: params.max_backtracks,
        h0,
        h_new,
        slope,
    })
}

/// Direction computed for one batch, with its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDirection {
    pub d: Vec<f64>,
    pub descent_ip: f64,
    pub scale: f64,
    pub inner_iters: usize,
    pub jvp_calls: usize,
    pub vjp_calls: usize,
}

/// Direction for `method` on the batch `indices` at `w`.
///
/// For `spl`/`armijo_spl` the gradient source yields `γ ∇h_S`; for the
/// drop-in rules it yields `∇h_S`.
pub fn step_direction(config: &TrainConfig, data: &Dataset, indices: &[usize], w: &[f64]) -> Result<StepDirection> {
    let batch = data.batch(indices)?;
    let f = config.model.forward_batch(w, &batch.inputs)?;
    let loss = BatchLoss::new(config.loss, &batch.targets)?;
    let jac = make_jacobian_operator(&config.model, w, &batch)?;
    let spl_like = matches!(config.method, Method::Spl | Method::ArmijoSpl);
    let (d, descent_ip, inner_iters, scale) = match config.direction {
        DirectionSource::Gradient => {
            let g = batch_gradient(&jac, &loss, &f)?;
            let d: Vec<f64> = if spl_like {
                g.iter().map(|x| config.gamma * x).collect()
            } else {
                g.clone()
            };
            let gn = norm(&g);
            (d.clone(), dot(&d, &g), 0, 1.0 + norm(&d) * gn)
        }
        DirectionSource::ProxLinear => {
            let spec = config.subproblem();
            let res = match config.reg {
                Regularizer::None => gn_direction(&jac, &loss, &f, &spec)?,
                reg => regularized_dual_direction(&jac, &loss, &f, &spec, w, reg)?,
            };
            // ‖∇h_S‖ is not returned by the solvers; bound the scale by ‖d‖ alone.
            let scale = 1.0 + norm(&res.d);
            (res.d, res.descent_inner_product, res.report.iterations, scale)
        }
    };
    Ok(StepDirection {
        d,
        descent_ip,
        scale,
        inner_iters,
        jvp_calls: jac.jvp_calls(),
        vjp_calls: jac.vjp_calls(),
    })
}

fn batch_loss(model: &ModelSpec, kind: LossKind, data: &Dataset, indices: &[usize], w: &[f64]) -> Result<f64> {
    let batch = data.batch(indices)?;
    let f = model.forward_batch(w, &batch.inputs)?;
    // Overflowed outputs are reported as a NaN loss, not an error.
    if !f.as_slice().iter().all(|v| v.is_finite()) {
        return Ok(f64::NAN);
    }
    BatchLoss::new(kind, &batch.targets)?.mean_value(&f)
}

/// `w' = w − d` with the configured direction.
pub fn spl_step(config: &TrainConfig, data: &Dataset, indices: &[usize], w: &[f64]) -> Result<Vec<f64>> {
    let dir = step_direction(config, data, indices, w)?;
    Ok(w.iter().zip(&dir.d).map(|(a, b)| a - b).collect())
}

/// `w' = w − η d` with `η` from [`armijo_search`] on the same batch.
pub fn armijo_spl_step(
    config: &TrainConfig,
    data: &Dataset,
    indices: &[usize],
    w: &[f64],
) -> Result<(Vec<f64>, ArmijoOutcome)> {
    let dir = step_direction(config, data, indices, w)?;
    armijo_apply(config, data, indices, w, &dir)
}

fn armijo_apply(
    config: &TrainConfig,
    data: &Dataset,
    indices: &[usize],
    w: &[f64],
    dir: &StepDirection,
) -> Result<(Vec<f64>, ArmijoOutcome)> {
    let outcome = armijo_search_with_slope(
        |x| batch_loss(&config.model, config.loss, data, indices, x),
        w,
        &dir.d,
        dir.descent_ip,
        dir.scale,
        &config.armijo,
    )?;
    let next = w.iter().zip(&dir.d).map(|(a, b)| a - outcome.eta * b).collect();
    Ok((next, outcome))
}

/// Fraction of rows whose output argmax matches the target argmax.
pub fn accuracy(outputs: &OutputBlock, targets: &OutputBlock) -> f64 {
    let argmax = |r: &[f64]| {
        r.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let hits = outputs
        .iter_rows()
        .zip(targets.iter_rows())
        .filter(|(o, t)| argmax(o) == argmax(t))
        .count();
    hits as f64 / outputs.rows() as f64
}

/// Mean loss and accuracy over the whole dataset.
pub fn evaluate(model: &ModelSpec, kind: LossKind, data: &Dataset, w: &[f64]) -> Result<(f64, f64)> {
    let f = model.forward_batch(w, &data.inputs)?;
    let loss = BatchLoss::new(kind, &data.targets)?.mean_value(&f)?;
    Ok((loss, accuracy(&f, &data.targets)))
}

/// One outer step. Counters are cumulative over the run; full-data metrics
/// are filled on the last step of each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// `h_S(w)` before the update.
    pub batch_loss: f64,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub inner_iters: usize,
    pub jvp_calls: usize,
    pub vjp_calls: usize,
    pub descent_ip: f64,
    /// Armijo outcome, for `armijo_spl`.
    pub armijo: Option<ArmijoOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub params: Vec<f64>,
    /// Set when a non-finite batch loss stopped the run.
    pub aborted: Option<String>,
}

/// Step-at-a-time training loop.
#[derive(Debug, Clone)]
pub struct Trainer<'d> {
    config: TrainConfig,
    data: &'d Dataset,
    params: Vec<f64>,
    state: OptimizerState,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    step: usize,
    inner_iters: usize,
    jvp_calls: usize,
    vjp_calls: usize,
    aborted: Option<String>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Parameter("dataset is empty".into()));
        }
        if config.batch_size > data.len() {
            return Err(Error::Parameter(alloc::format!(
                "batch size {} exceeds dataset size {}",
                config.batch_size,
                data.len()
            )));
        }
        check_len("dataset input dim", config.model.input_dim(), data.input_dim)?;
        check_len("dataset output dim", config.model.output_dim(), data.output_dim())?;
        let params = config.model.init_params(config.seed);
        let p = params.len();
        let mut trainer = Trainer {
            config,
            data,
            params,
            state: OptimizerState::new(p),
            order: (0..data.len()).collect(),
            cursor: 0,
            epoch: 0,
            step: 0,
            inner_iters: 0,
            jvp_calls: 0,
            vjp_calls: 0,
            aborted: None,
        };
        trainer.shuffle();
        Ok(trainer)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn aborted(&self) -> Option<&str> {
        self.aborted.as_deref()
    }

    fn shuffle(&mut self) {
        self.order = (0..self.data.len()).collect();
        let mut rng = rng::stream(self.config.seed, rng::STREAM_SHUFFLE, self.epoch as u64);
        self.order.shuffle(&mut rng);
    }

    fn finished(&self) -> bool {
        self.aborted.is_some()
            || self.epoch >= self.config.epochs
            || self.config.steps.is_some_and(|s| self.step >= s)
    }

    /// Runs one step; `None` once the run is over.
    pub fn next_step(&mut self) -> Result<Option<StepRecord>> {
        if self.finished() {
            return Ok(None);
        }
        let cfg = &self.config;
        let end = (self.cursor + cfg.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.cursor..end].to_vec();
        let h = batch_loss(&cfg.model, cfg.loss, self.data, &indices, &self.params)?;
        let mut record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            batch_loss: h,
            train_loss: None,
            train_acc: None,
            eta: cfg.eta,
            gamma: cfg.gamma,
            inner_iters: self.inner_iters,
            jvp_calls: self.jvp_calls,
            vjp_calls: self.vjp_calls,
            descent_ip: f64::NAN,
            armijo: None,
        };
        if !h.is_finite() {
            self.aborted = Some(alloc::format!(
                "non-finite batch loss at step {} (epoch {})",
                self.step,
                self.epoch
            ));
            return Ok(Some(record));
        }

        let dir = step_direction(cfg, self.data, &indices, &self.params)?;
        self.inner_iters += dir.inner_iters;
        self.jvp_calls += dir.jvp_calls;
        self.vjp_calls += dir.vjp_calls;
        record.descent_ip = dir.descent_ip;
        match cfg.method {
            Method::Spl => {
                record.eta = 1.0;
                for (w, d) in self.params.iter_mut().zip(&dir.d) {
                    *w -= d;
                }
            }
            Method::ArmijoSpl => {
                let (next, outcome) = armijo_apply(cfg, self.data, &indices, &self.params, &dir)?;
                self.params = next;
                record.eta = outcome.eta;
                record.armijo = Some(outcome);
            }
            Method::Sgd | Method::Momentum | Method::Adam => {
                let rule = match cfg.method {
                    Method::Sgd => UpdateRule::Sgd,
                    Method::Momentum => UpdateRule::Momentum,
                    _ => UpdateRule::Adam,
                };
                outer_update(rule, &mut self.state, &mut self.params, &dir.d, cfg.eta, &cfg.hyper)?;
            }
        }
        record.inner_iters = self.inner_iters;
        record.jvp_calls = self.jvp_calls;
        record.vjp_calls = self.vjp_calls;

        self.step += 1;
        self.cursor = end;
        let epoch_done = self.cursor >= self.order.len();
        if epoch_done || self.finished() {
            let (loss, acc) = evaluate(&self.config.model, self.config.loss, self.data, &self.params)?;
            record.train_loss = Some(loss);
            record.train_acc = Some(acc);
        }
        if epoch_done {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        Ok(Some(record))
    }
}

/// Runs `config` on `data` to completion.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainHistory> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let mut records = Vec::new();
    while let Some(r) = trainer.next_step()? {
        records.push(r);
    }
    Ok(TrainHistory {
        records,
        aborted: trainer.aborted.clone(),
        params: trainer.params,
    })
}
