use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use land_core::baselines::IntrinsicMeanConfig;
use land_core::eval::{self, IsotropicMixture, MetricRecord};
use land_core::mixture::{e_step, ls_mixture};
use land_core::{
    em_fit, fit_mle, gmm_fit, ConstantMetric, DataMatrix, FitConfig, GaussianMixture, GeodesicSolverConfig,
    GmmConfig, InitStrategy, KMeansConfig, LandDocument, LandMixture, LearnedMetric, Metric, MetricInfo,
    MetricParams, MixtureDocument, SamplingConfig,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::io::{read_dataset, sidecar, write_csv, write_dataset, write_json};
use crate::{CliError, EXIT_NOT_CONVERGED};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV.
    Gen(GenArgs),
    /// Fit a model to a CSV dataset and write it as JSON.
    Fit(FitCmd),
    /// Evaluate a fitted 2-D model's density on a regular grid.
    DensityGrid(GridArgs),
    /// Compute evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
}

pub fn run(cmd: Command) -> Result<u8, CliError> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Fit(a) => fit(a),
        Command::DensityGrid(a) => density_grid(a),
        Command::Eval(EvalCmd::Nll(a)) => eval_nll(a),
        Command::Eval(EvalCmd::FMeasure(a)) => eval_f_measure(a),
        Command::Eval(EvalCmd::AicBic(a)) => eval_aic_bic(a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    HalfEllipsoid,
    TwoMoons,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    kind: DatasetKind,
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Defaults to 0.05 for the half-ellipsoid and 0.08 for two moons.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn gen(mut a: GenArgs) -> Result<u8, CliError> {
    let noise = *a.noise.get_or_insert(match a.kind {
        DatasetKind::HalfEllipsoid => eval::DEFAULT_NOISE,
        DatasetKind::TwoMoons => 0.08,
    });
    let ds = match a.kind {
        DatasetKind::HalfEllipsoid => eval::gen_half_ellipsoid(a.n, noise, a.seed)?,
        DatasetKind::TwoMoons => eval::gen_two_moons(a.n, noise, a.seed)?,
    };
    write_dataset(&a.out, &ds)?;
    write_json(&sidecar(&a.out), &serde_json::json!({ "command": "gen", "args": a }))?;
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Land,
    LandMixture,
    Ls,
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Learned,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Random,
    Ls,
    Gmm,
}

impl From<InitKind> for InitStrategy {
    fn from(k: InitKind) -> Self {
        match k {
            InitKind::Random => InitStrategy::Random,
            InitKind::Ls => InitStrategy::LeastSquares,
            InitKind::Gmm => InitStrategy::Gmm,
        }
    }
}

/// Model and metric options shared by `fit` and `eval aic-bic`.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Dataset CSV; for the learned metric it is also the anchor set.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "land")]
    model: ModelKind,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, value_enum, default_value = "learned")]
    metric: MetricKind,
    /// Kernel width of the learned metric; defaults to 0.1 times the data range.
    #[arg(long)]
    sigma: Option<f64>,
    /// Metric ridge; defaults to 1e-2 times the squared median pairwise distance.
    #[arg(long)]
    rho: Option<f64>,
    /// Monte Carlo samples per normalization constant.
    #[arg(long, default_value_t = land_core::land::DEFAULT_MC_SAMPLES)]
    samples: usize,
    /// Defaults to gmm for land-mixture and ls otherwise.
    #[arg(long, value_enum)]
    init: Option<InitKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Restarts of the Riemannian K-means (ls model and ls init).
    #[arg(long, default_value_t = 5)]
    kmeans_restarts: usize,
}

/// Everything a fit depends on, after defaults are filled in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedFit {
    pub data: String,
    pub data_hash: String,
    pub model: ModelKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub metric: MetricKind,
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    pub fit: FitConfig,
}

/// A metric built from a dataset, together with how to record it.
struct BuiltMetric {
    metric: Box<dyn Metric>,
    info: MetricInfo,
}

fn build_metric(kind: MetricKind, points: &DataMatrix, sigma: Option<f64>, rho: Option<f64>, hash: &str) -> Result<BuiltMetric, CliError> {
    Ok(match kind {
        MetricKind::Euclidean => BuiltMetric { metric: Box::new(ConstantMetric::identity(points.dim())), info: MetricInfo::default() },
        MetricKind::Learned => {
            let sigma = sigma.unwrap_or_else(|| 0.1 * points.scale());
            let rho = rho.unwrap_or_else(|| MetricParams::suggested_rho(points));
            let params = MetricParams::new(sigma, rho)?;
            BuiltMetric {
                metric: Box::new(LearnedMetric::new(points.clone(), params)?),
                info: MetricInfo { sigma: Some(sigma), rho: Some(rho), anchor_hash: Some(hash.to_string()) },
            }
        }
    })
}

fn resolve(a: &ModelArgs, points: &DataMatrix, hash: &str) -> Result<(ResolvedFit, BuiltMetric), CliError> {
    if a.k == 0 || a.k > points.n_rows() {
        return Err(CliError::usage(format!("--k must be between 1 and the number of points ({})", points.n_rows())));
    }
    if a.model == ModelKind::Land && a.k != 1 {
        return Err(CliError::usage("--model land has a single component; use land-mixture for --k > 1"));
    }
    let built = build_metric(a.metric, points, a.sigma, a.rho, hash)?;
    let init = a.init.unwrap_or(if a.model == ModelKind::LandMixture { InitKind::Gmm } else { InitKind::Ls });
    let fit = FitConfig {
        mc_samples: a.samples,
        tol: a.tol,
        max_iter: a.max_iter,
        init: init.into(),
        kmeans_restarts: a.kmeans_restarts,
        rng_seed: a.seed,
        ..Default::default()
    };
    fit.validate()?;
    let resolved = ResolvedFit {
        data: a.data.display().to_string(),
        data_hash: hash.to_string(),
        model: a.model,
        k: a.k,
        metric: a.metric,
        sigma: built.info.sigma,
        rho: built.info.rho,
        fit,
    };
    Ok((resolved, built))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Model {
    Land(LandDocument),
    LandMixture(MixtureDocument),
    Ls(MixtureDocument),
    Gmm(GaussianMixture),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(flatten)]
    pub model: Model,
    pub config: ResolvedFit,
}

struct Fitted {
    model: Model,
    trace: Vec<f64>,
    converged: bool,
}

fn fit_model(r: &ResolvedFit, points: &DataMatrix, m: &BuiltMetric) -> Result<Fitted, CliError> {
    let cfg = &r.fit;
    let seed = cfg.rng_seed;
    Ok(match r.model {
        ModelKind::Land => {
            let f = fit_mle(points, m.metric.as_ref(), cfg)?;
            Fitted { model: Model::Land(LandDocument::new(&f.params, &m.info, seed)), trace: f.trace, converged: f.converged }
        }
        ModelKind::LandMixture => {
            let f = em_fit(points, m.metric.as_ref(), r.k, cfg)?;
            Fitted {
                model: Model::LandMixture(MixtureDocument::new(&f.mixture, &m.info, seed)),
                trace: f.trace,
                converged: f.converged,
            }
        }
        ModelKind::Ls => {
            let km = KMeansConfig {
                restarts: cfg.kmeans_restarts,
                seed,
                mean: IntrinsicMeanConfig { solver: cfg.solver, ..Default::default() },
                ..Default::default()
            };
            let mix = ls_mixture(points, m.metric.as_ref(), r.k, &km, cfg.mc_samples, &cfg.mc_solver, seed)?;
            Fitted { model: Model::Ls(MixtureDocument::new(&mix, &m.info, seed)), trace: Vec::new(), converged: true }
        }
        ModelKind::Gmm => {
            let g = gmm_fit(points, r.k, &GmmConfig { seed, ..Default::default() })?;
            Fitted { model: Model::Gmm(g), trace: Vec::new(), converged: true }
        }
    })
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Model JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Objective trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn fit(a: FitCmd) -> Result<u8, CliError> {
    let (ds, hash) = read_dataset(&a.model.data)?;
    let (resolved, metric) = resolve(&a.model, &ds.points, &hash)?;
    let fitted = fit_model(&resolved, &ds.points, &metric)?;
    let file = ModelFile { model: fitted.model, config: resolved };
    write_json(&a.out, &file)?;
    let trace_path = a.trace.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".trace.csv");
        PathBuf::from(s)
    });
    let rows: Vec<Vec<String>> =
        fitted.trace.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]).collect();
    write_csv(&trace_path, &["iteration", "objective"], &rows)?;
    write_json(&sidecar(&trace_path), &serde_json::json!({ "command": "fit", "config": file.config }))?;
    if fitted.converged {
        Ok(0)
    } else {
        warn!("maximum iterations reached without convergence; model written");
        Ok(EXIT_NOT_CONVERGED)
    }
}

/// A loaded model ready for evaluation.
enum Loaded {
    Lands { mix: LandMixture, metric: Box<dyn Metric> },
    Gmm(GaussianMixture),
}

fn read_model(path: &Path) -> Result<ModelFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Rebuilds the model; a learned metric needs its anchor file, checked
/// against the recorded hash.
fn load(file: &ModelFile, anchors: Option<&Path>) -> Result<Loaded, CliError> {
    let (mix, info) = match &file.model {
        Model::Gmm(g) => return Ok(Loaded::Gmm(g.clone())),
        Model::Land(doc) => (LandMixture::new(vec![1.0], vec![doc.params()?])?, doc.metric()),
        Model::LandMixture(doc) | Model::Ls(doc) => (doc.mixture()?, doc.metric()),
    };
    let metric: Box<dyn Metric> = match (info.sigma, info.rho, &info.anchor_hash) {
        (Some(sigma), Some(rho), Some(hash)) => {
            let path = anchors.ok_or_else(|| CliError::usage("this model uses a learned metric; pass its anchor data with --data"))?;
            let (ds, h) = read_dataset(path)?;
            if &h != hash {
                return Err(CliError::usage(format!("{} does not match the model's anchor file hash", path.display())));
            }
            Box::new(LearnedMetric::new(ds.points, MetricParams::new(sigma, rho)?)?)
        }
        _ => Box::new(ConstantMetric::identity(mix.dim())),
    };
    Ok(Loaded::Lands { mix, metric })
}

impl Loaded {
    fn dim(&self) -> usize {
        match self {
            Loaded::Lands { mix, .. } => mix.dim(),
            Loaded::Gmm(g) => g.dim(),
        }
    }

    /// Log densities at `points`; `None` where a log map failed.
    fn log_densities(&self, points: &DataMatrix) -> Result<Vec<Option<f64>>, CliError> {
        Ok(match self {
            Loaded::Lands { mix, metric } => {
                let logs = mix.log_maps(metric.as_ref(), points, &GeodesicSolverConfig::default());
                mix.log_densities(&logs)?
            }
            Loaded::Gmm(g) => g.log_pdfs(points)?.into_iter().map(Some).collect(),
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    /// Anchor data of a learned-metric model.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    xmin: f64,
    #[arg(long, allow_negative_numbers = true)]
    xmax: f64,
    #[arg(long, allow_negative_numbers = true)]
    ymin: f64,
    #[arg(long, allow_negative_numbers = true)]
    ymax: f64,
    /// Cells per axis; densities are evaluated at cell centers.
    #[arg(long, default_value_t = 50)]
    res: usize,
    #[arg(long)]
    out: PathBuf,
}

fn density_grid(a: GridArgs) -> Result<u8, CliError> {
    if a.res == 0 || !(a.xmax > a.xmin) || !(a.ymax > a.ymin) {
        return Err(CliError::usage("need --res >= 1, --xmax > --xmin and --ymax > --ymin"));
    }
    let file = read_model(&a.model)?;
    let model = load(&file, a.data.as_deref())?;
    if model.dim() != 2 {
        return Err(CliError::usage(format!("density grids need a 2-D model, this one has D = {}", model.dim())));
    }
    let center = |lo: f64, hi: f64, i: usize| lo + (i as f64 + 0.5) * (hi - lo) / a.res as f64;
    let mut values = Vec::with_capacity(2 * a.res * a.res);
    for j in 0..a.res {
        for i in 0..a.res {
            values.push(center(a.xmin, a.xmax, i));
            values.push(center(a.ymin, a.ymax, j));
        }
    }
    let grid = DataMatrix::new(a.res * a.res, 2, values)?;
    let dens = model.log_densities(&grid)?;
    let failed = dens.iter().filter(|d| d.is_none()).count();
    if failed > 0 {
        warn!("{failed} grid points could not be evaluated and are written as NaN");
    }
    let rows: Vec<Vec<String>> = grid
        .rows()
        .zip(&dens)
        .map(|(x, d)| vec![x[0].to_string(), x[1].to_string(), d.map_or(f64::NAN, f64::exp).to_string()])
        .collect();
    write_csv(&a.out, &["x", "y", "density"], &rows)?;
    write_json(&sidecar(&a.out), &serde_json::json!({ "command": "density-grid", "args": a, "model_config": file.config }))?;
    Ok(0)
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Mean negative log-likelihood of the half-ellipsoid truth under model samples.
    Nll(NllArgs),
    /// F-measure of the model's cluster assignments against dataset labels.
    FMeasure(FArgs),
    /// AIC and BIC of fits with K = 1..=k-max.
    AicBic(AicBicArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct NllArgs {
    #[arg(long)]
    model: PathBuf,
    /// Anchor data of a learned-metric model.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Component standard deviation of the half-ellipsoid truth.
    #[arg(long, default_value_t = eval::DEFAULT_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a, C: Serialize> {
    config: C,
    records: &'a [MetricRecord],
}

fn model_name(m: &Model) -> &'static str {
    match m {
        Model::Land(_) => "land",
        Model::LandMixture(_) => "land-mixture",
        Model::Ls(_) => "ls",
        Model::Gmm(_) => "gmm",
    }
}

fn model_k(m: &Model) -> usize {
    match m {
        Model::Land(_) => 1,
        Model::LandMixture(d) | Model::Ls(d) => d.k,
        Model::Gmm(g) => g.k(),
    }
}

fn eval_nll(a: NllArgs) -> Result<u8, CliError> {
    if !(a.noise > 0.0) || a.n_samples == 0 {
        return Err(CliError::usage("need --noise > 0 and --n-samples >= 1"));
    }
    let file = read_model(&a.model)?;
    let samples = match load(&file, a.data.as_deref())? {
        Loaded::Lands { mix, metric } => mix.sample(metric.as_ref(), a.n_samples, a.seed, &SamplingConfig::default())?,
        Loaded::Gmm(g) => g.sample(a.n_samples, a.seed, &[])?,
    };
    let truth = IsotropicMixture::half_ellipse(a.noise);
    let value = eval::mean_nll_under_truth(&samples, &truth);
    let record = MetricRecord {
        model: model_name(&file.model).into(),
        k: model_k(&file.model),
        seed: a.seed,
        metric_name: "mean_nll_under_truth".into(),
        value,
    };
    write_json(&a.out, &MetricsFile { config: serde_json::json!({ "args": a, "model_config": file.config }), records: &[record] })?;
    Ok(0)
}

#[derive(Debug, Args, Serialize)]
pub struct FArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled dataset; also the anchor data when it was used for the fit.
    #[arg(long)]
    data: PathBuf,
    /// Anchor data of a learned-metric model, if different from --data.
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn eval_f_measure(a: FArgs) -> Result<u8, CliError> {
    let file = read_model(&a.model)?;
    let (ds, _) = read_dataset(&a.data)?;
    let labels = ds.labels.as_ref().ok_or_else(|| CliError::usage(format!("{} has no label column", a.data.display())))?;
    let assignments = match load(&file, Some(a.anchors.as_deref().unwrap_or(&a.data)))? {
        Loaded::Lands { mix, metric } => e_step(&ds.points, &mix, metric.as_ref(), &GeodesicSolverConfig::default())?.assignments(),
        Loaded::Gmm(g) => g.assignments(&ds.points)?,
    };
    let record = MetricRecord {
        model: model_name(&file.model).into(),
        k: model_k(&file.model),
        seed: file.config.fit.rng_seed,
        metric_name: "f_measure".into(),
        value: eval::f_measure(labels, &assignments)?,
    };
    write_json(&a.out, &MetricsFile { config: serde_json::json!({ "args": a, "model_config": file.config }), records: &[record] })?;
    Ok(0)
}

#[derive(Debug, Args)]
pub struct AicBicArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Largest K in the sweep.
    #[arg(long, default_value_t = 4)]
    k_max: usize,
    #[arg(long)]
    out: PathBuf,
}

fn eval_aic_bic(a: AicBicArgs) -> Result<u8, CliError> {
    if a.model.model == ModelKind::Land {
        return Err(CliError::usage("a K sweep needs --model land-mixture, ls or gmm"));
    }
    if a.k_max == 0 {
        return Err(CliError::usage("--k-max must be at least 1"));
    }
    let (ds, hash) = read_dataset(&a.model.data)?;
    let n = ds.points.n_rows();
    let d = ds.points.dim();
    let mut records = Vec::new();
    let mut configs = Vec::new();
    let mut code = 0;
    for k in 1..=a.k_max {
        let args = ModelArgs { k, ..a.model.clone() };
        let (resolved, metric) = resolve(&args, &ds.points, &hash)?;
        let fitted = fit_model(&resolved, &ds.points, &metric)?;
        if !fitted.converged {
            code = EXIT_NOT_CONVERGED;
        }
        let ll = match &fitted.model {
            Model::Gmm(g) => g.log_likelihood(&ds.points)?,
            Model::Land(doc) => LandMixture::new(vec![1.0], vec![doc.params()?])?
                .log_likelihood(metric.metric.as_ref(), &ds.points, &resolved.fit.solver)?
                .0,
            Model::LandMixture(doc) | Model::Ls(doc) => {
                let (ll, skipped) = doc.mixture()?.log_likelihood(metric.metric.as_ref(), &ds.points, &resolved.fit.solver)?;
                if skipped > 0 {
                    warn!("K = {k}: {skipped} points skipped in the log-likelihood");
                }
                ll
            }
        };
        let (aic, bic) = eval::aic_bic(ll, eval::num_params(k, d), n);
        info!("K = {k}: log-likelihood {ll:.4}, AIC {aic:.4}, BIC {bic:.4}");
        let name = model_name(&fitted.model);
        for (metric_name, value) in [("log_likelihood", ll), ("aic", aic), ("bic", bic)] {
            records.push(MetricRecord { model: name.into(), k, seed: a.model.seed, metric_name: metric_name.into(), value });
        }
        configs.push(resolved);
    }
    write_json(&a.out, &MetricsFile { config: serde_json::json!({ "k_max": a.k_max, "fits": configs }), records: &records })?;
    Ok(code)
}
