//! Adam, the learning-rate schedule, minibatching and the training loop.

use std::io::Write;
use std::path::PathBuf;

use crate::autodiff::{Gradients, ParamStore, Tape, Tensor};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::model::{Model, ModelBundle, ModelKind};
use crate::rng::Rng;

/// Stream of [`Rng::stream`] used for minibatches and training noise.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: ModelKind,
    /// Points per step (single cloud) or clouds per step (family).
    pub batch_size: usize,
    /// Points drawn from each cloud per step (family only).
    pub points_per_cloud: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_period` epochs (family only).
    pub lr_decay: f64,
    pub decay_period: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Record the loss every this many iterations.
    pub log_every: usize,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

impl TrainConfig {
    /// One object: batch of 100 points, constant learning rate.
    pub fn single() -> Self {
        Self {
            mode: ModelKind::Single,
            batch_size: 100,
            points_per_cloud: 0,
            iterations: 5000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.25,
            decay_period: 5000,
            clip_norm: Some(10.0),
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            checkpoint_path: None,
            loss_csv: None,
        }
    }

    /// Object family: initial rate 2e-3 quartered every `decay_period` epochs.
    pub fn full() -> Self {
        Self {
            mode: ModelKind::Full,
            batch_size: 8,
            points_per_cloud: 256,
            lr: 2e-3,
            ..Self::single()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 || self.log_every == 0 || self.decay_period == 0 {
            return bad("batch size, log interval and decay period must be positive");
        }
        if self.mode == ModelKind::Full && self.points_per_cloud == 0 {
            return bad("points per cloud must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.eps > 0.0) {
            return bad("learning rate and adam epsilon must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning-rate decay must lie in (0, 1]");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// Rate at `iteration`. Family mode steps the rate by `lr_decay` every
/// `decay_period` epochs, an epoch being `objects / batch_size` iterations;
/// single-cloud mode keeps it constant.
pub fn lr_at(iteration: usize, cfg: &TrainConfig, objects: usize) -> f64 {
    match cfg.mode {
        ModelKind::Single => cfg.lr,
        ModelKind::Full => {
            let epoch = iteration * cfg.batch_size / objects.max(1);
            cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_period) as i32)
        }
    }
}

/// First and second moments per parameter and the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub step: u64,
}

/// Bias-corrected Adam with optional global-norm clipping. A non-finite
/// gradient aborts before any parameter changes and names the parameter.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let mut sq = 0.0;
    for (id, g) in grads.params() {
        if !store.is_trainable(id) {
            continue;
        }
        if g.shape() != store.get(id).shape() {
            return Err(Error::Shape {
                op: "adam",
                lhs: g.shape().to_vec(),
                rhs: store.get(id).shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteParamGradient(store.name(id).to_string()));
        }
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    state.m.resize(store.len(), None);
    state.v.resize(store.len(), None);
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.params() {
        if !store.is_trainable(id) {
            continue;
        }
        let k = id.index();
        let shape = g.shape();
        let m = state.m[k].get_or_insert_with(|| Tensor::zeros(shape));
        let v = state.v[k].get_or_insert_with(|| Tensor::zeros(shape));
        let p = store.get_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g * clip;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Training data for either model kind.
#[derive(Clone, Debug)]
pub enum Dataset {
    Single(PointCloud),
    Family(Vec<PointCloud>),
}

impl Dataset {
    fn objects(&self) -> usize {
        match self {
            Dataset::Single(_) => 1,
            Dataset::Family(v) => v.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    /// Loss per point of the minibatch.
    pub loss: f64,
    pub lr: f64,
}

/// Draws minibatches: points with replacement for one cloud; clouds by
/// reshuffled passes, each subsampled without replacement, for a family.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn clouds(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn subsample(cloud: &PointCloud, m: usize, rng: &mut Rng) -> Vec<f64> {
    let n = cloud.len();
    let idx: Vec<usize> = if m <= n {
        let mut all: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first `m` entries are a uniform subset.
        for i in 0..m {
            let j = i + rng.below(n - i);
            all.swap(i, j);
        }
        all.truncate(m);
        all
    } else {
        (0..m).map(|_| rng.below(n)).collect()
    };
    idx.iter().flat_map(|&i| cloud.points.row(i).iter().copied()).collect()
}

fn single_batch(cloud: &PointCloud, b: usize, rng: &mut Rng) -> Result<Tensor> {
    let d = cloud.dim();
    let data = (0..b)
        .flat_map(|_| {
            let i = rng.below(cloud.len());
            cloud.points.row(i).to_vec()
        })
        .collect();
    Tensor::new(vec![b, d], data)
}

fn family_batch(clouds: &[PointCloud], cfg: &TrainConfig, batcher: &mut Batcher, rng: &mut Rng) -> Result<Tensor> {
    let d = clouds[0].dim();
    let ids = batcher.clouds(cfg.batch_size, rng);
    let mut data = Vec::with_capacity(ids.len() * cfg.points_per_cloud * d);
    for i in ids {
        data.extend(subsample(&clouds[i], cfg.points_per_cloud, rng));
    }
    Tensor::new(vec![cfg.batch_size * cfg.points_per_cloud, d], data)
}

fn check_data(bundle: &ModelBundle, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if bundle.hyper.kind != cfg.mode {
        return Err(Error::InvalidArgument(format!(
            "training mode {} does not match a {} model",
            cfg.mode, bundle.hyper.kind
        )));
    }
    let clouds: &[PointCloud] = match data {
        Dataset::Single(c) => std::slice::from_ref(c),
        Dataset::Family(v) => v,
    };
    match (data, cfg.mode) {
        (Dataset::Single(_), ModelKind::Single) => {}
        (Dataset::Family(v), ModelKind::Full) => {
            if v.is_empty() {
                return Err(Error::Empty("object family"));
            }
            if cfg.batch_size < 2 {
                return Err(Error::InvalidArgument(
                    "family training needs at least 2 clouds per batch for encoder statistics".into(),
                ));
            }
        }
        _ => return Err(Error::InvalidArgument("dataset does not match the training mode".into())),
    }
    for c in clouds {
        if c.is_empty() {
            return Err(Error::Empty("training cloud"));
        }
        if c.dim() != bundle.dim() {
            return Err(Error::SizeMismatch {
                what: "point dimension",
                left: c.dim(),
                right: bundle.dim(),
            });
        }
    }
    Ok(())
}

/// Loss per point for the model on a fixed batch, evaluation mode, with
/// noise from `rng`.
pub fn evaluate_loss(bundle: &ModelBundle, x: &Tensor, clouds: usize, rng: &mut Rng) -> Result<f64> {
    let mut t = Tape::new(&bundle.store);
    let xv = t.constant(x.clone());
    let loss = match &bundle.model {
        Model::Single(m) => m.loss(&mut t, xv, rng)?,
        Model::Full(m) => m.training_loss(&mut t, xv, clouds, x.rows() / clouds, rng)?.0,
    };
    Ok(t.value(loss).item() / x.rows() as f64)
}

/// Train in place. Runs the data-dependent actnorm initialization on the
/// first batch unless already done, then `cfg.iterations` Adam steps.
/// `on_record` sees every logged loss. A non-finite loss or gradient
/// aborts, leaving the last written checkpoint untouched.
pub fn train(
    bundle: &mut ModelBundle,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(bundle, data, cfg)?;
    let mut rng = Rng::stream(cfg.seed, TRAIN_STREAM);
    let mut batcher = Batcher::new(data.objects());
    let mut adam = AdamState::default();
    let mut records = Vec::new();
    let mut csv = match &cfg.loss_csv {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "iteration,loss,lr")?;
            Some(f)
        }
        None => None,
    };

    let mut next_batch = |rng: &mut Rng| -> Result<(Tensor, usize)> {
        match data {
            Dataset::Single(c) => Ok((single_batch(c, cfg.batch_size, rng)?, 1)),
            Dataset::Family(v) => Ok((family_batch(v, cfg, &mut batcher, rng)?, cfg.batch_size)),
        }
    };

    for it in 0..cfg.iterations {
        let (x, clouds) = next_batch(&mut rng)?;
        if it == 0 {
            let model = bundle.model.clone();
            let initialized = match &model {
                Model::Single(m) => m.flow.is_initialized(&bundle.store),
                Model::Full(m) => m.flow.is_initialized(&bundle.store),
            };
            if !initialized {
                match &model {
                    Model::Single(m) => m.actnorm_init(&mut bundle.store, &x)?,
                    Model::Full(m) => m.actnorm_init(&mut bundle.store, &x, clouds, x.rows() / clouds)?,
                }
            }
        }
        let lr = lr_at(it, cfg, data.objects());
        let rows = x.rows() as f64;
        let (value, grads) = {
            let mut t = Tape::training(&bundle.store);
            let xv = t.constant(x);
            let loss = match &bundle.model {
                Model::Single(m) => m.loss(&mut t, xv, &mut rng)?,
                Model::Full(m) => m.training_loss(&mut t, xv, clouds, rows as usize / clouds, &mut rng)?.0,
            };
            let per_point = t.scale(loss, 1.0 / rows);
            let value = t.value(per_point).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at iteration {it}")));
            }
            (value, t.backward(per_point)?)
        };
        adam_step(&mut bundle.store, &grads, &mut adam, cfg, lr)?;
        for u in &grads.stat_updates {
            u.apply(&mut bundle.store);
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let r = LossRecord {
                iteration: it,
                loss: value,
                lr,
            };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{},{:?},{:?}", r.iteration, r.loss, r.lr)?;
            }
            on_record(&r);
            records.push(r);
        }
        if let Some(p) = &cfg.checkpoint_path {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                bundle.save(p)?;
            }
        }
    }
    if let Some(f) = csv.as_mut() {
        f.flush()?;
    }
    if let Some(p) = &cfg.checkpoint_path {
        bundle.save(p)?;
    }
    Ok(records)
}
