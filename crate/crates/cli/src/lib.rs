//! Command-line front end: argument definitions and the six commands.

pub mod config;
pub mod svg;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use chartflow::autodiff::Tensor;
use chartflow::data::{
    generate_family, generate_synthetic, read_cloud, read_dataset, write_cloud, write_dataset, PointCloud,
    SyntheticSpec,
};
use chartflow::metrics::{self, Distance, MetricRow, EXACT_EMD_MAX};
use chartflow::model::{ModelBundle, ModelKind};
use chartflow::rng::Rng;
use chartflow::trainer::{train, Dataset};

use config::{Config, DataSource, TrainSetup, CONFIG_ENV};

/// Failure of a command; the variant decides the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input paths (exit 2).
    Usage(String),
    /// Failure while computing (exit 3).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<chartflow::Error> for CliError {
    fn from(e: chartflow::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "chartflow", version, about = "Chart-conditioned normalizing flows for point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write a checkpoint and loss trace.
    Train(TrainArgs),
    /// Sample clouds from a checkpoint.
    Generate(GenerateArgs),
    /// Encode clouds and decode new samples of the same shapes.
    Reconstruct(ReconstructArgs),
    /// Compare a generated set against a reference set.
    Evaluate(EvaluateArgs),
    /// Assign each point of a cloud to a chart.
    Segment(SegmentArgs),
    /// Draw a CSV cloud as an SVG scatter plot.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set iterations=N`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// CSV cloud or dataset directory; shorthand for `--set dataset=PATH`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint path; shorthand for `--set checkpoint=PATH`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Print nothing while training.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Points per cloud.
    #[arg(long, short = 'm', default_value_t = 2048)]
    pub points: usize,
    /// Number of clouds.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A CSV cloud or a dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Points per reconstruction; defaults to the input size.
    #[arg(long, short = 'm')]
    pub points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of generated clouds.
    #[arg(long)]
    pub generated: PathBuf,
    /// Directory of reference clouds.
    #[arg(long)]
    pub reference: PathBuf,
    /// Comma-separated subset of mmd, cov, 1nna, jsd.
    #[arg(long, default_value = "mmd,cov,1nna,jsd")]
    pub metrics: String,
    /// Comma-separated subset of emd, cd.
    #[arg(long, default_value = "emd,cd")]
    pub distances: String,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV cloud; a `chart` column is taken as ground truth.
    #[arg(long)]
    pub input: PathBuf,
    /// Labeled CSV output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// SVG output; defaults to the input with an `.svg` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Coordinates to draw, e.g. `0,2` for an x-z projection.
    #[arg(long, default_value = "0,1")]
    pub axes: String,
}

/// Run one parsed command. Informational output goes to `log`.
pub fn run(cli: Cli, log: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a, log),
        Command::Generate(a) => cmd_generate(a, log),
        Command::Reconstruct(a) => cmd_reconstruct(a, log),
        Command::Evaluate(a) => cmd_evaluate(a, log),
        Command::Segment(a) => cmd_segment(a, log),
        Command::Plot(a) => cmd_plot(a, log),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_model(path: &Path) -> Result<ModelBundle, CliError> {
    require_exists(path, "checkpoint")?;
    ModelBundle::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Write clouds and, for 2-D ones, a plot next to each CSV.
fn write_clouds(dir: &Path, clouds: &[PointCloud]) -> Result<(), CliError> {
    let paths = write_dataset(dir, clouds)?;
    for (p, c) in paths.iter().zip(clouds) {
        if c.dim() == 2 {
            std::fs::write(p.with_extension("svg"), svg::render(c, (0, 1)))?;
        }
    }
    Ok(())
}

pub fn train_config(a: &TrainArgs) -> Result<Config, CliError> {
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for pair in &a.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = a.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(n) = a.iterations {
        cfg.set("iterations", &n.to_string())?;
    }
    if let Some(p) = &a.dataset {
        cfg.set("dataset", &p.to_string_lossy())?;
    }
    if let Some(p) = &a.checkpoint {
        cfg.set("checkpoint", &p.to_string_lossy())?;
    }
    Ok(cfg)
}

fn load_training_data(setup: &TrainSetup) -> Result<Dataset, CliError> {
    let kind = setup.hyper.kind;
    let dim = setup.hyper.dim;
    match &setup.data {
        DataSource::Path(p) => match (p.is_dir(), kind) {
            (true, ModelKind::Full) => Ok(Dataset::Family(read_dataset(p, Some(dim))?)),
            (false, ModelKind::Single) => Ok(Dataset::Single(read_cloud(p, Some(dim))?)),
            (true, ModelKind::Single) => Err(CliError::Usage(format!(
                "`dataset` {} is a directory; a single-cloud model needs one CSV file",
                p.display()
            ))),
            (false, ModelKind::Full) => Err(CliError::Usage(format!(
                "`dataset` {} is a file; a full model needs a dataset directory",
                p.display()
            ))),
        },
        DataSource::Synthetic {
            shape,
            points,
            noise,
            objects,
            seed,
        } => {
            if dim != 2 {
                return Err(CliError::Usage("synthetic shapes are 2-D; set `dim = 2`".into()));
            }
            let mut spec = SyntheticSpec::new(*shape, *points, *seed);
            spec.noise = *noise;
            Ok(match kind {
                ModelKind::Single => Dataset::Single(generate_synthetic(&spec)?),
                ModelKind::Full => Dataset::Family(
                    generate_family(&spec, *objects, &Default::default())?
                        .into_iter()
                        .map(|o| o.cloud)
                        .collect(),
                ),
            })
        }
    }
}

fn cmd_train(a: TrainArgs, log: &mut dyn Write) -> Result<(), CliError> {
    let cfg = train_config(&a)?;
    let setup = TrainSetup::from_config(&cfg)?;
    let data = load_training_data(&setup)?;
    let mut bundle = ModelBundle::new(setup.hyper.clone())?;
    ensure_parent(&setup.checkpoint)?;
    ensure_parent(&setup.loss_csv)?;
    let mut tc = setup.train.clone();
    tc.checkpoint_path = Some(setup.checkpoint.clone());
    tc.loss_csv = Some(setup.loss_csv.clone());
    let quiet = a.quiet;
    train(&mut bundle, &data, &tc, |r| {
        if !quiet {
            let _ = writeln!(log, "iteration {:>6}  loss {:>10.4}  lr {:.3e}", r.iteration, r.loss, r.lr);
        }
    })?;
    if !quiet {
        writeln!(log, "wrote {} and {}", setup.checkpoint.display(), setup.loss_csv.display())?;
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, log: &mut dyn Write) -> Result<(), CliError> {
    let bundle = load_model(&a.checkpoint)?;
    if a.count == 0 {
        return Ok(());
    }
    if a.points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    let mut rng = Rng::new(a.seed);
    let clouds = (0..a.count)
        .map(|_| {
            let (x, labels) = bundle.generate(a.points, &mut rng)?;
            PointCloud::new(x, Some(labels))
        })
        .collect::<chartflow::Result<Vec<_>>>()?;
    write_clouds(&a.out, &clouds)?;
    writeln!(log, "wrote {} clouds to {}", clouds.len(), a.out.display())?;
    Ok(())
}

fn read_inputs(path: &Path, dim: usize) -> Result<Vec<PointCloud>, CliError> {
    require_exists(path, "input")?;
    let dim_error = |e: chartflow::Error| match e {
        e @ chartflow::Error::SizeMismatch { .. } => CliError::Usage(format!("{}: {e}", path.display())),
        e => e.into(),
    };
    if path.is_dir() {
        read_dataset(path, Some(dim)).map_err(dim_error)
    } else {
        Ok(vec![read_cloud(path, Some(dim)).map_err(dim_error)?])
    }
}

fn cmd_reconstruct(a: ReconstructArgs, log: &mut dyn Write) -> Result<(), CliError> {
    let bundle = load_model(&a.checkpoint)?;
    if bundle.hyper.kind != ModelKind::Full {
        return Err(CliError::Usage("reconstruction needs a full-model checkpoint".into()));
    }
    let inputs = read_inputs(&a.input, bundle.dim())?;
    let mut rng = Rng::new(a.seed);
    let mut out = Vec::with_capacity(inputs.len());
    for c in &inputs {
        let m = a.points.unwrap_or(c.len());
        let (x, labels) = bundle.reconstruct(&c.points, m, &mut rng)?;
        out.push(PointCloud::new(x, Some(labels))?);
    }
    write_clouds(&a.out, &out)?;
    writeln!(log, "wrote {} reconstructions to {}", out.len(), a.out.display())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum MetricKind {
    Mmd,
    Cov,
    OneNna,
    Jsd,
}

fn parse_list<T>(text: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| CliError::Usage(format!("unknown {what} `{s}`"))))
        .collect()
}

fn read_set(dir: &Path, what: &str) -> Result<Vec<Tensor>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{what} directory {} does not exist", dir.display())));
    }
    let clouds = read_dataset(dir, None)?;
    if clouds.is_empty() {
        return Err(CliError::Usage(format!("{what} directory {} holds no clouds", dir.display())));
    }
    Ok(clouds.into_iter().map(|c| c.points).collect())
}

/// Metric rows for `generated` against `reference`. Errors name the metric.
pub fn evaluate_sets(
    generated: &[Tensor],
    reference: &[Tensor],
    metric_names: &str,
    distance_names: &str,
) -> Result<Vec<MetricRow>, CliError> {
    let kinds = parse_list(metric_names, "metric", |s| match s.to_ascii_lowercase().as_str() {
        "mmd" => Some(MetricKind::Mmd),
        "cov" => Some(MetricKind::Cov),
        "1nna" | "1-nna" => Some(MetricKind::OneNna),
        "jsd" => Some(MetricKind::Jsd),
        _ => None,
    })?;
    let distances = parse_list(distance_names, "distance", |s| s.parse::<Distance>().ok())?;
    let max_points = generated.iter().chain(reference).map(Tensor::rows).max().unwrap_or(0);
    let exact = |d: Distance| d != Distance::Emd || max_points <= EXACT_EMD_MAX;
    let named = |metric: &str, d: Option<Distance>| {
        let tag = match d {
            Some(d) => format!("{metric}-{}", d.name()),
            None => metric.to_string(),
        };
        move |e: chartflow::Error| CliError::Runtime(format!("{tag}: {e}"))
    };
    let mut rows = Vec::new();
    for &d in &distances {
        let wants = |k| kinds.contains(&k);
        if wants(MetricKind::Mmd) || wants(MetricKind::Cov) {
            let (mmd, cov) = metrics::mmd_cov(generated, reference, d).map_err(named("MMD/COV", Some(d)))?;
            if wants(MetricKind::Mmd) {
                rows.push(row("MMD", d, mmd, exact(d)));
            }
            if wants(MetricKind::Cov) {
                rows.push(row("COV", d, 100.0 * cov, exact(d)));
            }
        }
        if wants(MetricKind::OneNna) {
            let v = metrics::one_nn_accuracy(generated, reference, d).map_err(named("1-NNA", Some(d)))?;
            rows.push(row("1-NNA", d, v, exact(d)));
        }
    }
    if kinds.contains(&MetricKind::Jsd) {
        let j = metrics::jsd(generated, reference).map_err(named("JSD", None))?;
        rows.push(MetricRow {
            metric: "JSD".into(),
            distance: String::new(),
            value: j.value,
            exact: true,
        });
    }
    Ok(rows)
}

fn row(metric: &str, d: Distance, value: f64, exact: bool) -> MetricRow {
    MetricRow {
        metric: metric.into(),
        distance: d.name().into(),
        value,
        exact,
    }
}

fn cmd_evaluate(a: EvaluateArgs, log: &mut dyn Write) -> Result<(), CliError> {
    let generated = read_set(&a.generated, "generated")?;
    let reference = read_set(&a.reference, "reference")?;
    let rows = evaluate_sets(&generated, &reference, &a.metrics, &a.distances)?;
    match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            metrics::write_report(&rows, &mut f)?;
            f.flush()?;
        }
        None => metrics::write_report(&rows, &mut std::io::stdout().lock())?,
    }
    if let Some(p) = &a.out {
        writeln!(log, "wrote {}", p.display())?;
    }
    Ok(())
}

fn cmd_segment(a: SegmentArgs, log: &mut dyn Write) -> Result<(), CliError> {
    let bundle = load_model(&a.checkpoint)?;
    let mut inputs = read_inputs(&a.input, bundle.dim())?;
    if a.input.is_dir() || inputs.len() != 1 {
        return Err(CliError::Usage("segment takes one CSV cloud".into()));
    }
    let cloud = inputs.remove(0);
    let predicted = bundle.segment(&cloud.points)?;
    ensure_parent(&a.out)?;
    write_cloud(&a.out, &PointCloud::new(cloud.points.clone(), Some(predicted.clone()))?)?;
    if let Some(truth) = &cloud.labels {
        let (nmi, purity) = metrics::clustering_scores(&predicted, truth)?;
        writeln!(std::io::stdout().lock(), "metric,value\nNMI,{nmi:?}\npurity,{purity:?}")?;
    }
    writeln!(log, "wrote {}", a.out.display())?;
    Ok(())
}

fn cmd_plot(a: PlotArgs, log: &mut dyn Write) -> Result<(), CliError> {
    require_exists(&a.input, "input")?;
    let cloud = read_cloud(&a.input, None)?;
    let axes = parse_list(&a.axes, "axis", |s| s.parse::<usize>().ok())?;
    let &[ax, ay] = axes.as_slice() else {
        return Err(CliError::Usage("--axes takes two coordinate indices".into()));
    };
    if ax >= cloud.dim() || ay >= cloud.dim() || ax == ay {
        return Err(CliError::Usage(format!(
            "--axes {ax},{ay} invalid for a {}-D cloud",
            cloud.dim()
        )));
    }
    let out = a.out.clone().unwrap_or_else(|| a.input.with_extension("svg"));
    ensure_parent(&out)?;
    std::fs::write(&out, svg::render(&cloud, (ax, ay)))?;
    writeln!(log, "wrote {}", out.display())?;
    Ok(())
}
