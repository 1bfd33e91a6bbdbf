//! Run configuration from a `key = value` file and command-line flags.
//!
//! Both sources use the same key names. Flags override the file. A missing
//! `seed` falls back to the `DUALGN_SEED` environment variable, then to 0.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualgn_core::directions::{Regularizer, SolvePath};
use dualgn_core::trainer::{DirectionSource, Method, TrainConfig};
use dualgn_core::{LossKind, ModelSpec};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "DUALGN_SEED";

pub const KEYS: &[&str] = &[
    "method",
    "direction",
    "path",
    "loss",
    "model",
    "gamma",
    "eta",
    "tau",
    "tol",
    "batch-size",
    "epochs",
    "steps",
    "seed",
    "l1",
    "l2",
    "armijo-beta",
    "grid",
    "grid-param",
    "data",
    "out",
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs { n: usize, d: usize, k: usize, spread: f64 },
    Idx { images: PathBuf, labels: PathBuf },
}

/// Hidden widths only; input and output sizes come from the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelChoice {
    Linear,
    Mlp(Vec<usize>),
}

impl ModelChoice {
    pub fn build(&self, inputs: usize, outputs: usize) -> dualgn_core::Result<ModelSpec> {
        match self {
            ModelChoice::Linear => ModelSpec::linear(inputs, outputs),
            ModelChoice::Mlp(hidden) => {
                let mut dims = vec![inputs];
                dims.extend(hidden);
                dims.push(outputs);
                ModelSpec::mlp(&dims)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridParam {
    Gamma,
    Eta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub param: GridParam,
    /// Raw token (used in file names) and its value.
    pub points: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Everything except the model, which needs the data shape.
    pub train: TrainConfig,
    pub model: ModelChoice,
    pub data: DataSource,
    pub out: PathBuf,
    pub grid: Option<Grid>,
}

impl RunConfig {
    pub fn train_config(&self, inputs: usize, outputs: usize) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.model = self.model.build(inputs, outputs).map_err(|e| CliError::usage(format!("model: {e}")))?;
        Ok(cfg)
    }
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected `key = value`", lineno + 1)))?;
        let key = normalize_key(key);
        check_key(&key)?;
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_text(&text)
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(CliError::usage(format!("unknown key `{key}`")))
    }
}

/// Layers `flags` over `file`, then builds and validates the run.
pub fn resolve(
    file: BTreeMap<String, String>,
    flags: BTreeMap<String, String>,
    env_seed: Option<String>,
) -> Result<RunConfig> {
    let mut kv = file;
    for (k, v) in flags {
        let k = normalize_key(&k);
        check_key(&k)?;
        kv.insert(k, v);
    }
    if !kv.contains_key("seed") {
        if let Some(s) = env_seed {
            kv.insert("seed".into(), s);
        }
    }
    from_map(&kv)
}

fn required<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| CliError::usage(format!("missing required key `{key}`")))
}

fn number<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| CliError::usage(format!("`{key}`: cannot parse `{raw}` as a number")))
}

fn choice<T: Copy>(key: &str, raw: &str, options: &[(&str, T)]) -> Result<T> {
    let raw = raw.trim();
    options.iter().find(|(name, _)| *name == raw).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        CliError::usage(format!("`{key}`: expected one of {}, got `{raw}`", names.join(", ")))
    })
}

fn number_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|t| number(key, t)).collect()
}

pub fn parse_model(raw: &str) -> Result<ModelChoice> {
    let raw = raw.trim();
    if raw == "linear" {
        return Ok(ModelChoice::Linear);
    }
    match raw.strip_prefix("mlp:") {
        Some(dims) => Ok(ModelChoice::Mlp(number_list("model", dims)?)),
        None => Err(CliError::usage(format!("`model`: expected linear or mlp:<widths>, got `{raw}`"))),
    }
}

pub fn parse_data(raw: &str) -> Result<DataSource> {
    let raw = raw.trim();
    if let Some(rest) = raw.strip_prefix("blobs:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 4 {
            return Err(CliError::usage("`data`: expected blobs:<n>,<d>,<k>,<spread>"));
        }
        return Ok(DataSource::Blobs {
            n: number("data", parts[0])?,
            d: number("data", parts[1])?,
            k: number("data", parts[2])?,
            spread: number("data", parts[3])?,
        });
    }
    if let Some(rest) = raw.strip_prefix("idx:") {
        let (images, labels) = rest
            .split_once(',')
            .ok_or_else(|| CliError::usage("`data`: expected idx:<images>,<labels>"))?;
        return Ok(DataSource::Idx {
            images: PathBuf::from(images.trim()),
            labels: PathBuf::from(labels.trim()),
        });
    }
    Err(CliError::usage(format!("`data`: expected blobs:... or idx:..., got `{raw}`")))
}

fn parse_grid(raw: &str, param: GridParam) -> Result<Grid> {
    let points = raw
        .split(',')
        .map(|t| {
            let t = t.trim();
            let v: f64 = number("grid", t)?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::usage(format!("`grid`: values must be positive, got `{t}`")));
            }
            Ok((t.to_string(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(CliError::usage("`grid`: empty list"));
    }
    Ok(Grid { param, points })
}

fn from_map(kv: &BTreeMap<String, String>) -> Result<RunConfig> {
    let get = |k: &str| kv.get(k).map(String::as_str);
    let loss = match get("loss") {
        Some(raw) => choice("loss", raw, &[("squared", LossKind::Squared), ("logistic", LossKind::Logistic)])?,
        None => LossKind::Logistic,
    };
    // Placeholder model; replaced once the data shape is known.
    let mut train = TrainConfig::new(ModelSpec::linear(1, 1)?, loss);
    if let Some(raw) = get("method") {
        train.method = choice(
            "method",
            raw,
            &[
                ("spl", Method::Spl),
                ("armijo_spl", Method::ArmijoSpl),
                ("sgd", Method::Sgd),
                ("momentum", Method::Momentum),
                ("adam", Method::Adam),
            ],
        )?;
    }
    if let Some(raw) = get("direction") {
        train.direction = choice(
            "direction",
            raw,
            &[("gradient", DirectionSource::Gradient), ("proxlinear", DirectionSource::ProxLinear)],
        )?;
    }
    if let Some(raw) = get("path") {
        train.path = choice("path", raw, &[("primal", SolvePath::Primal), ("dual", SolvePath::Dual)])?;
    }
    if let Some(raw) = get("gamma") {
        train.gamma = number("gamma", raw)?;
    }
    if let Some(raw) = get("eta") {
        train.eta = number("eta", raw)?;
    }
    if let Some(raw) = get("tau") {
        train.tau = number("tau", raw)?;
    }
    if let Some(raw) = get("tol") {
        train.tol = number("tol", raw)?;
    }
    if let Some(raw) = get("batch-size") {
        train.batch_size = number("batch-size", raw)?;
    }
    if let Some(raw) = get("epochs") {
        train.epochs = number("epochs", raw)?;
    }
    if let Some(raw) = get("steps") {
        train.steps = Some(number("steps", raw)?);
    }
    if let Some(raw) = get("seed") {
        train.seed = number("seed", raw)?;
    }
    if let Some(raw) = get("armijo-beta") {
        train.armijo.beta = number("armijo-beta", raw)?;
    }
    train.reg = match (get("l1"), get("l2")) {
        (Some(_), Some(_)) => return Err(CliError::usage("`l1` and `l2` are mutually exclusive")),
        (Some(raw), None) => Regularizer::L1(number("l1", raw)?),
        (None, Some(raw)) => Regularizer::L2(number("l2", raw)?),
        (None, None) => Regularizer::None,
    };

    let grid_param = match get("grid-param") {
        Some(raw) => choice("grid-param", raw, &[("gamma", GridParam::Gamma), ("eta", GridParam::Eta)])?,
        None => GridParam::Gamma,
    };
    let grid = get("grid").map(|raw| parse_grid(raw, grid_param)).transpose()?;

    let model = match get("model") {
        Some(raw) => parse_model(raw)?,
        None => ModelChoice::Linear,
    };
    let data = parse_data(required(kv, "data")?)?;
    let out = PathBuf::from(required(kv, "out")?);

    train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(RunConfig {
        train,
        model,
        data,
        out,
        grid,
    })
}

/// `dir/run.csv` with token `1e-4` becomes `dir/run_g1e-4.csv`.
pub fn grid_path(out: &Path, token: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_g{token}.{}", ext.to_string_lossy()),
        None => format!("{stem}_g{token}"),
    };
    out.with_file_name(name)
}
