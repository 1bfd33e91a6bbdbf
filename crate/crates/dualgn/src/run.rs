//! Experiment execution and CSV metrics.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualgn_core::models::synth_blobs;
use dualgn_core::trainer::{StepRecord, TrainConfig, Trainer};
use dualgn_core::Dataset;

use crate::config::{grid_path, DataSource, GridParam, RunConfig};
use crate::error::{CliError, Result};
use crate::idx;

pub const HEADER: [&str; 12] = [
    "step",
    "epoch",
    "wall_ms",
    "batch_loss",
    "train_loss",
    "train_acc",
    "eta",
    "gamma",
    "inner_iters",
    "jvp_calls",
    "vjp_calls",
    "descent_ip",
];

/// One CSV row. Counters are cumulative over the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    pub epoch: usize,
    pub wall_ms: f64,
    pub batch_loss: f64,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub inner_iters: usize,
    pub jvp_calls: usize,
    pub vjp_calls: usize,
    pub descent_ip: f64,
}

impl RunRecord {
    pub fn new(r: &StepRecord, wall_ms: f64) -> Self {
        RunRecord {
            step: r.step,
            epoch: r.epoch,
            wall_ms,
            batch_loss: r.batch_loss,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            eta: r.eta,
            gamma: r.gamma,
            inner_iters: r.inner_iters,
            jvp_calls: r.jvp_calls,
            vjp_calls: r.vjp_calls,
            descent_ip: r.descent_ip,
        }
    }

    fn fields(&self) -> [String; 12] {
        // Debug keeps round-trip precision and switches to exponents for extremes.
        let real = |x: f64| format!("{x:?}");
        let opt = |v: Option<f64>| v.map(real).unwrap_or_default();
        [
            self.step.to_string(),
            self.epoch.to_string(),
            format!("{:.3}", self.wall_ms),
            real(self.batch_loss),
            opt(self.train_loss),
            opt(self.train_acc),
            real(self.eta),
            real(self.gamma),
            self.inner_iters.to_string(),
            self.jvp_calls.to_string(),
            self.vjp_calls.to_string(),
            real(self.descent_ip),
        ]
    }
}

/// Writes the header on creation and flushes after every row.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut sink = CsvSink {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        };
        sink.write(&HEADER)?;
        Ok(sink)
    }

    pub fn push(&mut self, record: &RunRecord) -> Result<()> {
        self.write(&record.fields())
    }

    fn write<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        let path = &self.path;
        self.writer.write_record(fields).map_err(|source| CliError::Csv {
            path: path.clone(),
            source,
        })?;
        self.writer.flush().map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })
    }
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Blobs { n, d, k, spread } => {
            synth_blobs(seed, *n, *d, *k, *spread).map_err(|e| CliError::usage(format!("data: {e}")))
        }
        DataSource::Idx { images, labels } => idx::load(images, labels, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub path: PathBuf,
    pub steps: usize,
    pub final_acc: Option<f64>,
    pub aborted: Option<String>,
}

/// Trains once, streaming one row per step to `path`.
pub fn run_single(cfg: &TrainConfig, data: &Dataset, path: &Path) -> Result<RunSummary> {
    let mut trainer = Trainer::new(cfg.clone(), data).map_err(|e| match e {
        dualgn_core::Error::Parameter(_) | dualgn_core::Error::Shape { .. } => CliError::usage(e.to_string()),
        e => CliError::Core(e),
    })?;
    let mut sink = CsvSink::create(path)?;
    let mut steps = 0;
    let mut final_acc = None;
    loop {
        let start = Instant::now();
        let Some(record) = trainer.next_step()? else { break };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        sink.push(&RunRecord::new(&record, wall_ms))?;
        steps += 1;
        final_acc = record.train_acc.or(final_acc);
    }
    Ok(RunSummary {
        path: path.to_path_buf(),
        steps,
        final_acc,
        aborted: trainer.aborted().map(str::to_string),
    })
}

/// Runs the configuration, once per grid point in grid mode.
pub fn run(cfg: &RunConfig) -> Result<Vec<RunSummary>> {
    let data = load_data(&cfg.data, cfg.train.seed)?;
    let base = cfg.train_config(data.input_dim, data.output_dim())?;
    let Some(grid) = &cfg.grid else {
        return Ok(vec![run_single(&base, &data, &cfg.out)?]);
    };
    let mut out = Vec::with_capacity(grid.points.len());
    for (token, value) in &grid.points {
        let mut point = base.clone();
        match grid.param {
            GridParam::Gamma => point.gamma = *value,
            GridParam::Eta => point.eta = *value,
        }
        out.push(run_single(&point, &data, &grid_path(&cfg.out, token))?);
    }
    Ok(out)
}
