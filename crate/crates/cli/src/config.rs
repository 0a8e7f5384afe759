//! Flat `key = value` run configuration.
//!
//! A file supplies values first, then command-line overrides replace them.
//! Every key must be known; a near miss gets a suggestion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chartflow::data::ShapeKind;
use chartflow::model::{Hyperparams, ModelKind};
use chartflow::trainer::TrainConfig;

use crate::CliError;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "CHARTFLOW_CONFIG";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("kind", "model kind: single or full"),
    ("dim", "point dimension"),
    ("charts", "number of charts n"),
    ("tau", "Gumbel-Softmax temperature"),
    ("mu", "weight of the cloud-marginal chart entropy (full model)"),
    ("lambda", "weight of the per-point posterior entropy"),
    ("feature_dim", "shape feature dimension (full model)"),
    ("width_factor", "multiplier on reference hidden widths"),
    ("flow_blocks", "blocks in the point flow"),
    ("prior_blocks", "blocks in the discrete feature prior"),
    ("prior", "feature prior backend: discrete or cnf"),
    ("cnf_steps", "RK4 steps of the cnf prior"),
    ("trace", "cnf trace: exact or hutchinson"),
    ("batch_size", "points (single) or clouds (full) per step"),
    ("points_per_cloud", "points drawn from each cloud per step (full)"),
    ("iterations", "optimizer steps"),
    ("lr", "initial learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("lr_decay", "learning-rate multiplier per decay period (full)"),
    ("decay_period", "epochs between learning-rate decays (full)"),
    ("clip_norm", "global gradient-norm clip, or none"),
    ("log_every", "loss logging interval in iterations"),
    ("checkpoint_every", "checkpoint interval in iterations, 0 for final only"),
    ("seed", "seed for initialization, batching and noise"),
    ("dataset", "CSV cloud file (single) or dataset directory (full)"),
    ("shape", "synthetic shape used when no dataset is given"),
    ("points", "points per synthetic cloud"),
    ("noise", "synthetic noise standard deviation"),
    ("objects", "synthetic family size (full)"),
    ("data_seed", "seed of the synthetic data, defaults to seed"),
    ("checkpoint", "checkpoint output path"),
    ("loss_csv", "loss trace output path"),
];

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, (String, Origin)>,
}

fn suggestion(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .map(|(k, _)| (*k, strsim::damerau_levenshtein(key, k)))
        .filter(|&(k, d)| d <= 2.max(k.len() / 4))
        .min_by_key(|&(_, d)| d)
        .map(|(k, _)| k)
}

fn check_key(key: &str, origin: &Origin) -> Result<(), CliError> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        return Ok(());
    }
    let hint = match suggestion(key) {
        Some(s) => format!("; did you mean `{s}`?"),
        None => String::new(),
    };
    Err(CliError::Usage(format!("{origin}: unknown key `{key}`{hint}")))
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let origin = Origin::File {
                path: path.to_path_buf(),
                line: i + 1,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}: expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            check_key(k, &origin)?;
            if let Some((_, prev)) = cfg.entries.get(k) {
                return Err(CliError::Usage(format!("{origin}: key `{k}` already set at {prev}")));
            }
            cfg.entries.insert(k.to_string(), (v.to_string(), origin));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Replace a value from the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        check_key(key, &Origin::Flag)?;
        self.entries.insert(key.to_string(), (value.to_string(), Origin::Flag));
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{pair}` is not of the form key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Parsed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, origin)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("{origin}: invalid value `{v}` for `{key}`"))),
        }
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn origin(&self, key: &str) -> Option<&Origin> {
        self.entries.get(key).map(|(_, o)| o)
    }
}

/// Training data named by a configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic {
        shape: ShapeKind,
        points: usize,
        noise: f64,
        objects: usize,
        seed: u64,
    },
}

/// Everything `train` needs, resolved from a [`Config`].
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub hyper: Hyperparams,
    pub train: TrainConfig,
    pub data: DataSource,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

fn parse_with<T>(cfg: &Config, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<Option<T>, CliError> {
    match cfg.raw(key) {
        None => Ok(None),
        Some(v) => f(v).map(Some).ok_or_else(|| {
            CliError::Usage(format!(
                "{}: invalid value `{v}` for `{key}`",
                cfg.origin(key).expect("present")
            ))
        }),
    }
}

impl TrainSetup {
    pub fn from_config(cfg: &Config) -> Result<Self, CliError> {
        let kind = parse_with(cfg, "kind", |v| v.parse::<ModelKind>().ok())?.unwrap_or(ModelKind::Single);
        let dim = cfg.get_or("dim", 2usize)?;
        let charts = cfg.get_or("charts", 4usize)?;
        let (mut hp, mut tc) = match kind {
            ModelKind::Single => (Hyperparams::single(dim, charts), TrainConfig::single()),
            ModelKind::Full => (
                Hyperparams::full(dim, charts, cfg.get_or("feature_dim", 8usize)?),
                TrainConfig::full(),
            ),
        };
        hp.tau = cfg.get_or("tau", hp.tau)?;
        hp.mu = cfg.get_or("mu", hp.mu)?;
        hp.lambda = cfg.get_or("lambda", hp.lambda)?;
        hp.feature_dim = cfg.get_or("feature_dim", hp.feature_dim)?;
        hp.width_factor = cfg.get_or("width_factor", hp.width_factor)?;
        hp.flow_blocks = cfg.get_or("flow_blocks", hp.flow_blocks)?;
        hp.prior_blocks = cfg.get_or("prior_blocks", hp.prior_blocks)?;
        if let Some(p) = parse_with(cfg, "prior", |v| v.parse().ok())? {
            hp.prior = p;
        }
        hp.cnf_steps = cfg.get_or("cnf_steps", hp.cnf_steps)?;
        if let Some(t) = parse_with(cfg, "trace", |v| v.parse().ok())? {
            hp.trace = t;
        }
        let seed = cfg.get_or("seed", 0u64)?;
        hp.seed = seed;
        tc.seed = seed;
        tc.batch_size = cfg.get_or("batch_size", tc.batch_size)?;
        tc.points_per_cloud = cfg.get_or("points_per_cloud", tc.points_per_cloud)?;
        tc.iterations = cfg.get_or("iterations", tc.iterations)?;
        tc.lr = cfg.get_or("lr", tc.lr)?;
        tc.beta1 = cfg.get_or("beta1", tc.beta1)?;
        tc.beta2 = cfg.get_or("beta2", tc.beta2)?;
        tc.eps = cfg.get_or("adam_eps", tc.eps)?;
        tc.lr_decay = cfg.get_or("lr_decay", tc.lr_decay)?;
        tc.decay_period = cfg.get_or("decay_period", tc.decay_period)?;
        if let Some(c) = parse_with(cfg, "clip_norm", |v| match v {
            "none" | "off" => Some(None),
            _ => v.parse::<f64>().ok().map(Some),
        })? {
            tc.clip_norm = c;
        }
        tc.log_every = cfg.get_or("log_every", tc.log_every)?;
        tc.checkpoint_every = cfg.get_or("checkpoint_every", tc.checkpoint_every)?;
        hp.validate().map_err(|e| CliError::Usage(format!("model configuration: {e}")))?;
        tc.validate().map_err(|e| CliError::Usage(format!("training configuration: {e}")))?;

        let data = if let Some(p) = cfg.raw("dataset") {
            let path = PathBuf::from(p);
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "{}: `dataset` path {} does not exist",
                    cfg.origin("dataset").expect("present"),
                    path.display()
                )));
            }
            DataSource::Path(path)
        } else if let Some(shape) = parse_with(cfg, "shape", |v| v.parse::<ShapeKind>().ok())? {
            if shape.is_family() != (kind == ModelKind::Full) {
                return Err(CliError::Usage(format!(
                    "`shape` {} does not fit a {kind} model",
                    shape.name()
                )));
            }
            DataSource::Synthetic {
                shape,
                points: cfg.get_or("points", if kind == ModelKind::Full { 2048 } else { 10_000 })?,
                noise: cfg.get_or("noise", chartflow::data::DEFAULT_NOISE)?,
                objects: cfg.get_or("objects", 200usize)?,
                seed: cfg.get_or("data_seed", seed)?,
            }
        } else {
            return Err(CliError::Usage(
                "missing key `dataset` (or `shape` for synthetic data)".into(),
            ));
        };
        let checkpoint = PathBuf::from(cfg.raw("checkpoint").unwrap_or("model.ckpt"));
        let loss_csv = match cfg.raw("loss_csv") {
            Some(p) => PathBuf::from(p),
            None => checkpoint.with_extension("loss.csv"),
        };
        Ok(Self {
            hyper: hp,
            train: tc,
            data,
            checkpoint,
            loss_csv,
        })
    }
}
