//! Single-cloud and multi-object chart-conditioned models.

mod checkpoint;
mod full;
mod single;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use full::{FullModel, FullNoise, FullTerms, PriorFlow};
pub use single::{SingleCloudModel, SingleTerms};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::{TraceMode, DEFAULT_STEPS, MIN_STEPS};
use crate::rng::Rng;

/// Rows pushed through a flow at once when generating.
pub const GENERATION_CHUNK: usize = 512;

/// Weight-initialization stream of [`Rng::stream`].
pub const INIT_STREAM: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Single,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Discrete,
    Cnf,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ModelKind::Single),
            "full" => Ok(ModelKind::Full),
            other => Err(Error::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Single => "single",
            ModelKind::Full => "full",
        })
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(PriorKind::Discrete),
            "cnf" => Ok(PriorKind::Cnf),
            other => Err(Error::InvalidArgument(format!("unknown prior backend `{other}`"))),
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::Discrete => "discrete",
            PriorKind::Cnf => "cnf",
        })
    }
}

fn trace_name(m: TraceMode) -> &'static str {
    match m {
        TraceMode::Exact => "exact",
        TraceMode::Hutchinson => "hutchinson",
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub kind: ModelKind,
    /// Point dimension `d`.
    pub dim: usize,
    /// Chart count `n`.
    pub charts: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Weight of the cloud-marginal entropy (full model only).
    pub mu: f64,
    /// Weight of the per-point posterior entropy.
    pub lambda: f64,
    pub feature_dim: usize,
    /// Multiplier on every reference hidden width.
    pub width_factor: f64,
    pub flow_blocks: usize,
    pub prior_blocks: usize,
    pub prior: PriorKind,
    pub cnf_steps: usize,
    pub trace: TraceMode,
    pub seed: u64,
}

impl Hyperparams {
    /// Defaults for one object: `λ = 1.1`, `τ = 0.1`, quarter widths.
    pub fn single(dim: usize, charts: usize) -> Self {
        Self {
            kind: ModelKind::Single,
            dim,
            charts,
            tau: 0.1,
            mu: 1.1,
            lambda: 1.1,
            feature_dim: 0,
            width_factor: 0.25,
            flow_blocks: 6,
            prior_blocks: 0,
            prior: PriorKind::Discrete,
            cnf_steps: DEFAULT_STEPS,
            trace: TraceMode::Exact,
            seed: 0,
        }
    }

    /// Defaults for an object family: `μ = 0.05`, `λ = 1.0`, `τ = 0.1`.
    pub fn full(dim: usize, charts: usize, feature_dim: usize) -> Self {
        Self {
            kind: ModelKind::Full,
            feature_dim,
            mu: 0.05,
            lambda: 1.0,
            prior_blocks: 3,
            ..Self::single(dim, charts)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.dim == 0 {
            return bad("point dimension must be positive");
        }
        if self.charts == 0 {
            return bad("chart count must be at least 1");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.mu.is_finite() && self.mu >= 0.0 && self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("regularizer weights must be non-negative");
        }
        if !(self.width_factor.is_finite() && self.width_factor > 0.0) {
            return bad("width factor must be positive");
        }
        if self.kind == ModelKind::Full {
            if self.feature_dim == 0 {
                return bad("feature dimension must be positive");
            }
            if self.prior == PriorKind::Cnf && self.cnf_steps < MIN_STEPS {
                return bad("cnf prior needs at least 4 integration steps");
            }
        }
        Ok(())
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.to_string()),
            ("dim", self.dim.to_string()),
            ("charts", self.charts.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("mu", format!("{:?}", self.mu)),
            ("lambda", format!("{:?}", self.lambda)),
            ("feature_dim", self.feature_dim.to_string()),
            ("width_factor", format!("{:?}", self.width_factor)),
            ("flow_blocks", self.flow_blocks.to_string()),
            ("prior_blocks", self.prior_blocks.to_string()),
            ("prior", self.prior.to_string()),
            ("cnf_steps", self.cnf_steps.to_string()),
            ("trace", trace_name(self.trace).to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Inverse of [`Hyperparams::to_text`]. Every key must be present.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut hp = Self::single(1, 1);
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed hyperparameter line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |what: &str| Error::Checkpoint(format!("bad value `{v}` for `{what}`"));
            match k {
                "kind" => hp.kind = v.parse()?,
                "dim" => hp.dim = v.parse().map_err(|_| num(k))?,
                "charts" => hp.charts = v.parse().map_err(|_| num(k))?,
                "tau" => hp.tau = v.parse().map_err(|_| num(k))?,
                "mu" => hp.mu = v.parse().map_err(|_| num(k))?,
                "lambda" => hp.lambda = v.parse().map_err(|_| num(k))?,
                "feature_dim" => hp.feature_dim = v.parse().map_err(|_| num(k))?,
                "width_factor" => hp.width_factor = v.parse().map_err(|_| num(k))?,
                "flow_blocks" => hp.flow_blocks = v.parse().map_err(|_| num(k))?,
                "prior_blocks" => hp.prior_blocks = v.parse().map_err(|_| num(k))?,
                "prior" => hp.prior = v.parse()?,
                "cnf_steps" => hp.cnf_steps = v.parse().map_err(|_| num(k))?,
                "trace" => hp.trace = v.parse()?,
                "seed" => hp.seed = v.parse().map_err(|_| num(k))?,
                other => return Err(Error::Checkpoint(format!("unknown hyperparameter `{other}`"))),
            }
            seen.push(k.to_string());
        }
        for (k, _) in hp.pairs() {
            if !seen.iter().any(|s| s == k) {
                return Err(Error::Checkpoint(format!("missing hyperparameter `{k}`")));
            }
        }
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Single(SingleCloudModel),
    Full(FullModel),
}

/// Hyperparameters, parameter store and architecture travelling together.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub hyper: Hyperparams,
    pub store: ParamStore,
    pub model: Model,
}

impl ModelBundle {
    /// Fresh model with weights drawn from the initialization stream of
    /// `hyper.seed`.
    pub fn new(hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(hyper.seed, INIT_STREAM);
        let model = match hyper.kind {
            ModelKind::Single => Model::Single(SingleCloudModel::new(&mut store, &hyper, &mut rng)?),
            ModelKind::Full => Model::Full(FullModel::new(&mut store, &hyper, &mut rng)?),
        };
        Ok(Self { hyper, store, model })
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim
    }

    pub fn charts(&self) -> usize {
        self.hyper.charts
    }

    /// A new cloud of `m` points and its chart labels.
    pub fn generate(&self, m: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        match &self.model {
            Model::Single(s) => s.generate(&self.store, m, rng),
            Model::Full(f) => f.generate(&self.store, m, rng),
        }
    }

    /// Chart posteriors for every point of `x`.
    pub fn posteriors(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.dim() {
            return Err(Error::SizeMismatch {
                what: "point dimension",
                left: x.cols(),
                right: self.dim(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::Empty("point cloud"));
        }
        match &self.model {
            Model::Single(s) => s.posteriors(&self.store, x),
            Model::Full(f) => f.posteriors(&self.store, x),
        }
    }

    /// Most probable chart per point.
    pub fn segment(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.posteriors(x)?;
        Ok((0..p.rows())
            .map(|r| {
                let row = p.row(r);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Reconstruction from the posterior-mean features. Needs a full model.
    pub fn reconstruct(&self, x: &Tensor, m_out: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        if x.rows() == 0 {
            return Err(Error::Empty("point cloud"));
        }
        match &self.model {
            Model::Full(f) => f.reconstruct(&self.store, x, m_out, rng),
            Model::Single(_) => Err(Error::InvalidArgument(
                "reconstruction needs a multi-object model".into(),
            )),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_checkpoint(self, &mut bytes)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        read_checkpoint(&mut bytes.as_slice())
    }
}
