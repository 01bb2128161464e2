//! The locally adaptive normal distribution: Monte Carlo normalization,
//! maximum-likelihood fitting by block-coordinate descent, and sampling.
//!
//! Density (with respect to the Riemannian measure):
//!
//! ```text
//! p(x) = exp(-1/2 <Log_mu(x), Sigma^-1 Log_mu(x)>) / C(mu, Sigma)
//! C    = Z * E_{v ~ N(0, Sigma)}[ m(mu, v) ],  m(mu, v) = sqrt|M(Exp_mu(v))|
//! Z    = sqrt((2 pi)^D |Sigma|)
//! ```

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{covariance_from_logs, intrinsic_mean, IntrinsicMeanConfig};
use crate::data::DataMatrix;
use crate::error::{LandError, Result};
use crate::geodesic::{exp_endpoint, log_map, log_map_seeded, GeodesicSolverConfig, ShootingSeed};
use crate::linalg;
use crate::metric::Metric;
use crate::rng::{self, purpose};

/// Number of Monte Carlo samples used for the normalization constant unless
/// configured otherwise.
pub const DEFAULT_MC_SAMPLES: usize = 3000;

/// A cached normalization constant estimate and the sample count behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConst {
    pub value: f64,
    pub samples: usize,
}

/// Mean, covariance (through its factor Sigma^-1 = A^T A) and cached
/// normalization constant of one LAND.
#[derive(Debug, Clone, PartialEq)]
pub struct LandParams {
    mu: Vec<f64>,
    a: DMatrix<f64>,
    sigma: DMatrix<f64>,
    precision: DMatrix<f64>,
    norm_const: Option<NormConst>,
}

impl LandParams {
    /// From a covariance; A is its upper-triangular inverse Cholesky factor.
    pub fn from_covariance(mu: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let a = linalg::factor_from_covariance(&sigma)?;
        Self::from_factor(mu, a)
    }

    pub fn from_factor(mu: Vec<f64>, a: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if a.nrows() != d || a.ncols() != d {
            return Err(LandError::DimensionMismatch { expected: d, got: a.nrows() });
        }
        if mu.iter().chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(LandError::invalid("non-finite LAND parameters"));
        }
        let det = a.determinant().abs();
        if det < 1e-12 {
            return Err(LandError::RankLoss(det));
        }
        let precision = linalg::symmetrize(&(a.transpose() * &a));
        let sigma = linalg::spd_inverse(&precision)?;
        Ok(Self { mu, a, sigma, precision, norm_const: None })
    }

    pub fn with_norm_const(mut self, nc: NormConst) -> Self {
        self.norm_const = Some(nc);
        self
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn norm_const(&self) -> Option<NormConst> {
        self.norm_const
    }

    /// ln Z = 1/2 (D ln 2 pi + ln |Sigma|).
    pub fn log_z(&self) -> f64 {
        let d = self.dim() as f64;
        // |Sigma| = 1 / det(A)^2
        0.5 * d * (2.0 * std::f64::consts::PI).ln() - self.a.determinant().abs().ln()
    }

    pub(crate) fn log_norm_const(&self) -> Result<f64> {
        match self.norm_const {
            Some(nc) if nc.value > 0.0 => Ok(nc.value.ln()),
            _ => Err(LandError::invalid("normalization constant has not been estimated")),
        }
    }
}

/// Tangent samples and their volume factors m(mu, v_s) behind one estimate
/// of C(mu, Sigma).
#[derive(Debug, Clone, PartialEq)]
pub struct McSamples {
    /// Tangent vectors that integrated successfully.
    pub tangents: Vec<Vec<f64>>,
    /// m(mu, v_s) for each retained tangent.
    pub measures: Vec<f64>,
    pub requested: usize,
    pub failed: usize,
    pub log_z: f64,
    /// ln C-hat.
    pub log_estimate: f64,
}

impl McSamples {
    pub fn estimate(&self) -> f64 {
        self.log_estimate.exp()
    }

    pub fn norm_const(&self) -> NormConst {
        NormConst { value: self.estimate(), samples: self.tangents.len() }
    }

    /// Z / (C S), the weight on each m(mu, v_s) in the gradient sums.
    fn coefficient(&self) -> f64 {
        (self.log_z - self.log_estimate).exp() / self.tangents.len() as f64
    }

    /// (Z / (C S)) sum_s m_s v_s
    pub fn weighted_mean(&self) -> Vec<f64> {
        let d = self.tangents.first().map_or(0, |v| v.len());
        let c = self.coefficient();
        let mut out = vec![0.0; d];
        for (v, m) in self.tangents.iter().zip(&self.measures) {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += c * m * vi;
            }
        }
        out
    }

    /// (Z / (C S)) sum_s m_s v_s v_s^T
    pub fn weighted_second_moment(&self) -> DMatrix<f64> {
        let d = self.tangents.first().map_or(0, |v| v.len());
        let c = self.coefficient();
        let mut out = DMatrix::zeros(d, d);
        for (v, m) in self.tangents.iter().zip(&self.measures) {
            linalg::outer_add(&mut out, v, c * m);
        }
        out
    }
}

/// Draws `count` tangent vectors from N(0, Sigma) in antithetic pairs
/// (v, -v). Pair `i` uses its own stream keyed by `counters ++ [i]`. When
/// there are more pairs than dimensions the standard-normal draws are
/// moment-matched (whitened to unit empirical second moment) before
/// scaling by the Cholesky factor of Sigma.
pub fn draw_tangents(sigma: &DMatrix<f64>, count: usize, seed: u64, counters: &[u64]) -> Result<Vec<Vec<f64>>> {
    let d = sigma.nrows();
    let l = linalg::cholesky_lower(sigma)?;
    let pairs = count.div_ceil(2);
    let mut key = counters.to_vec();
    key.push(0);
    let last = key.len() - 1;
    let mut zs: Vec<Vec<f64>> = (0..pairs)
        .map(|i| {
            key[last] = i as u64;
            let mut r = rng::stream(seed, &key);
            (0..d).map(|_| r.sample(StandardNormal)).collect()
        })
        .collect();
    if pairs > d {
        let mut second = DMatrix::zeros(d, d);
        for z in &zs {
            linalg::outer_add(&mut second, z, 1.0 / pairs as f64);
        }
        if let Some(w) = linalg::cholesky_lower(&second).ok().and_then(|c| c.try_inverse()) {
            for z in zs.iter_mut() {
                *z = linalg::mat_vec(&w, z);
            }
        }
    }
    let mut out = Vec::with_capacity(count);
    for z in zs {
        let v = linalg::mat_vec(&l, &z);
        let neg = v.iter().map(|a| -a).collect();
        out.push(v);
        out.push(neg);
    }
    out.truncate(count);
    Ok(out)
}

/// Monte Carlo estimate C-hat = (Z / S) sum_s m(mu, v_s) from the given
/// tangent samples. Samples whose exponential map fails are dropped.
pub fn normalization_constant_from_tangents(
    metric: &dyn Metric,
    mu: &[f64],
    sigma: &DMatrix<f64>,
    tangents: Vec<Vec<f64>>,
    cfg: &GeodesicSolverConfig,
) -> Result<McSamples> {
    let requested = tangents.len();
    if requested == 0 {
        return Err(LandError::invalid("need at least one Monte Carlo sample"));
    }
    let measures: Vec<Option<f64>> = tangents
        .par_iter()
        .map(|v| {
            let end = exp_endpoint(metric, mu, v, cfg).ok()?;
            metric.measure_density(&end).ok().filter(|m| m.is_finite())
        })
        .collect();
    let mut kept_t = Vec::with_capacity(requested);
    let mut kept_m = Vec::with_capacity(requested);
    for (v, m) in tangents.into_iter().zip(measures) {
        if let Some(m) = m {
            kept_t.push(v);
            kept_m.push(m);
        }
    }
    let failed = requested - kept_t.len();
    if kept_t.is_empty() {
        return Err(LandError::AllSamplesFailed(requested));
    }
    if failed > 0 {
        warn!("{failed} of {requested} Monte Carlo samples failed to integrate and were skipped");
    }
    let d = mu.len() as f64;
    let log_z = 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + linalg::spd_log_det(sigma)?);
    let mean_m = kept_m.iter().sum::<f64>() / kept_m.len() as f64;
    Ok(McSamples { tangents: kept_t, measures: kept_m, requested, failed, log_z, log_estimate: log_z + mean_m.ln() })
}

/// Estimates C(mu, Sigma) with `samples` fresh tangent draws.
pub fn normalization_constant(
    metric: &dyn Metric,
    mu: &[f64],
    sigma: &DMatrix<f64>,
    samples: usize,
    seed: u64,
    counters: &[u64],
    cfg: &GeodesicSolverConfig,
) -> Result<McSamples> {
    if samples == 0 {
        return Err(LandError::invalid("need at least one Monte Carlo sample"));
    }
    let tangents = draw_tangents(sigma, samples, seed, counters)?;
    normalization_constant_from_tangents(metric, mu, sigma, tangents, cfg)
}

/// Logarithm maps of every data point from one base point. Failed solves
/// are kept as `None` and excluded from sums.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMaps {
    pub base: Vec<f64>,
    pub tangents: Vec<Option<Vec<f64>>>,
    jacobians: Vec<Option<DMatrix<f64>>>,
}

type Solved = Option<(Vec<f64>, Option<DMatrix<f64>>)>;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl LogMaps {
    /// Solves all log maps by continuation: points are taken in waves of
    /// increasing distance from the base, and each solve starts from the
    /// solution (tangent, endpoint and shooting Jacobian) of its nearest
    /// already-solved data point. The straight-line guess and then the
    /// previous tangent in `warm`, shifted by the base displacement, are
    /// fallbacks. Solves within a wave run in parallel and only see earlier
    /// waves, so results do not depend on the thread count.
    pub fn compute(
        metric: &dyn Metric,
        base: &[f64],
        data: &DataMatrix,
        warm: Option<&LogMaps>,
        cfg: &GeodesicSolverConfig,
    ) -> Self {
        const WAVE: usize = 16;
        let n = data.n_rows();
        let mut solved: Vec<Solved> = vec![None; n];
        let mut order: Vec<usize> = (0..n).collect();
        let from_base: Vec<f64> = data.rows().map(|x| squared_distance(x, base)).collect();
        order.sort_by(|&a, &b| from_base[a].total_cmp(&from_base[b]).then(a.cmp(&b)));
        for wave in order.chunks(WAVE) {
            let anchors: Vec<usize> = (0..n).filter(|&i| solved[i].is_some()).collect();
            let results: Vec<Solved> = wave
                .par_iter()
                .map(|&i| {
                    let x = data.row(i);
                    let nearest = anchors.iter().copied().min_by(|&a, &b| {
                        squared_distance(data.row(a), x).total_cmp(&squared_distance(data.row(b), x)).then(a.cmp(&b))
                    });
                    if let Some(j) = nearest {
                        if let Some((t, jac)) = &solved[j] {
                            let seed = ShootingSeed { tangent: t, endpoint: Some(data.row(j)), jacobian: jac.as_ref() };
                            if let Ok(s) = log_map_seeded(metric, base, x, seed, cfg) {
                                return Some((s.tangent, s.jacobian.or_else(|| jac.clone())));
                            }
                        }
                    }
                    let guess: Vec<f64> = x.iter().zip(base).map(|(a, b)| a - b).collect();
                    if let Ok(s) = log_map_seeded(metric, base, x, ShootingSeed::new(&guess), cfg) {
                        return Some((s.tangent, s.jacobian));
                    }
                    let w = warm?;
                    let t = w.tangents[i].as_ref()?;
                    let guess: Vec<f64> = t.iter().zip(base.iter().zip(&w.base)).map(|(v, (b, ob))| v - (b - ob)).collect();
                    let s = log_map_seeded(metric, base, x, ShootingSeed::new(&guess), cfg).ok()?;
                    Some((s.tangent, s.jacobian))
                })
                .collect();
            for (&i, r) in wave.iter().zip(results) {
                solved[i] = r;
            }
        }

        let (tangents, jacobians): (Vec<_>, Vec<_>) = solved
            .into_iter()
            .map(|s| match s {
                Some((t, j)) => (Some(t), j),
                None => (None, None),
            })
            .unzip();
        let failed = tangents.iter().filter(|t| t.is_none()).count();
        if failed > 0 {
            warn!("{failed} of {n} logarithm maps failed and are skipped");
        }
        Self { base: base.to_vec(), tangents, jacobians }
    }

    /// Shooting Jacobian kept from the solve of point `i`.
    pub fn jacobian(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.jacobians[i].as_ref()
    }

    pub fn failures(&self) -> usize {
        self.tangents.iter().filter(|t| t.is_none()).count()
    }

    pub fn succeeded(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.tangents.iter().enumerate().filter_map(|(i, t)| t.as_deref().map(|t| (i, t)))
    }

    /// Fails when more than half of the solves failed.
    pub fn check(&self) -> Result<()> {
        let failed = self.failures();
        if 2 * failed > self.tangents.len() {
            return Err(LandError::TooManyFailures { failed, total: self.tangents.len() });
        }
        Ok(())
    }
}

/// sum_n r_n [ 1/2 <L_n, Sigma^-1 L_n> + ln C ] and sum_n r_n, over the
/// points whose log map succeeded.
pub(crate) fn weighted_objective(logs: &LogMaps, r: &[f64], params: &LandParams) -> Result<(f64, f64)> {
    let log_c = params.log_norm_const()?;
    let mut sum = 0.0;
    let mut total = 0.0;
    for (i, l) in logs.succeeded() {
        sum += r[i] * (0.5 * linalg::quad_form(params.precision(), l) + log_c);
        total += r[i];
    }
    Ok((sum, total))
}

/// Unnormalised directions with weights r_n:
/// d_mu = sum_n r_n L_n - R (Z / (C S)) sum_s m_s v_s and
/// grad_A = A [ sum_n r_n L_n L_n^T - R (Z / (C S)) sum_s m_s v_s v_s^T ],
/// with R = sum_n r_n over the succeeded points.
pub(crate) fn weighted_directions(logs: &LogMaps, r: &[f64], params: &LandParams, mc: &McSamples) -> (Vec<f64>, DMatrix<f64>, f64) {
    let total: f64 = logs.succeeded().map(|(i, _)| r[i]).sum();
    let mut dir: Vec<f64> = mc.weighted_mean().into_iter().map(|v| -total * v).collect();
    let mut inner = mc.weighted_second_moment() * (-total);
    for (i, l) in logs.succeeded() {
        for (a, b) in dir.iter_mut().zip(l) {
            *a += r[i] * b;
        }
        linalg::outer_add(&mut inner, l, r[i]);
    }
    (dir, params.a() * inner, total)
}

/// phi = 1/(2N) sum_n <Log_mu(x_n), Sigma^-1 Log_mu(x_n)> + ln C, over the
/// points whose log map succeeded.
pub fn objective_from_logs(logs: &LogMaps, params: &LandParams) -> Result<f64> {
    logs.check()?;
    let (sum, total) = weighted_objective(logs, &vec![1.0; logs.tangents.len()], params)?;
    Ok(sum / total)
}

/// Mean negative log-likelihood of `data` (up to the failure exclusion).
pub fn nll_objective(data: &DataMatrix, params: &LandParams, metric: &dyn Metric, cfg: &GeodesicSolverConfig) -> Result<f64> {
    let logs = LogMaps::compute(metric, params.mu(), data, None, cfg);
    objective_from_logs(&logs, params)
}

/// ln p(x) with respect to the Riemannian measure.
pub fn log_density(params: &LandParams, metric: &dyn Metric, x: &[f64], cfg: &GeodesicSolverConfig) -> Result<f64> {
    let v = log_map(metric, params.mu(), x, cfg)?;
    Ok(-0.5 * linalg::quad_form(params.precision(), &v) - params.log_norm_const()?)
}

/// Steepest-descent direction for the mean:
/// d = 1/N sum_n Log_mu(x_n) - (Z / (C S)) sum_s m(mu, v_s) v_s.
pub fn descent_direction_mu(logs: &LogMaps, params: &LandParams, mc: &McSamples) -> Vec<f64> {
    let (d, _, total) = weighted_directions(logs, &vec![1.0; logs.tangents.len()], params, mc);
    d.into_iter().map(|v| v / total).collect()
}

/// Euclidean gradient of phi in mu, -Sigma^-1 d.
pub fn grad_mu(logs: &LogMaps, params: &LandParams, mc: &McSamples) -> Vec<f64> {
    let d = descent_direction_mu(logs, params, mc);
    linalg::mat_vec(params.precision(), &d).into_iter().map(|v| -v).collect()
}

/// Gradient of phi in A:
/// A [ 1/N sum_n L_n L_n^T - (Z / (C S)) sum_s m_s v_s v_s^T ].
pub fn grad_a(logs: &LogMaps, params: &LandParams, mc: &McSamples) -> DMatrix<f64> {
    let (_, g, total) = weighted_directions(logs, &vec![1.0; logs.tangents.len()], params, mc);
    g / total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// A random data point and the empirical tangent covariance there.
    Random,
    /// Intrinsic least-squares mean and covariance.
    LeastSquares,
    /// Euclidean Gaussian (mixture) fit, then empirical tangent covariances.
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub step_mu: f64,
    /// Initial stepsize for A; `None` uses 0.25 / lambda_max(Sigma_0).
    pub step_a: Option<f64>,
    pub mc_samples: usize,
    /// Threshold on the squared objective change.
    pub tol: f64,
    pub max_iter: usize,
    pub init: InitStrategy,
    /// Forgy restarts of the Riemannian K-means behind the least-squares
    /// mixture initialization.
    pub kmeans_restarts: usize,
    pub rng_seed: u64,
    /// Used for the data log maps and the mean update.
    pub solver: GeodesicSolverConfig,
    /// Used for the exponential maps of the Monte Carlo samples.
    pub mc_solver: GeodesicSolverConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            step_mu: 0.5,
            step_a: None,
            mc_samples: DEFAULT_MC_SAMPLES,
            tol: 1e-6,
            max_iter: 100,
            init: InitStrategy::LeastSquares,
            kmeans_restarts: 5,
            rng_seed: 0,
            solver: GeodesicSolverConfig::default(),
            mc_solver: GeodesicSolverConfig::sampling(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(LandError::invalid("mc_samples must be at least 1"));
        }
        if !(self.step_mu > 0.0) || self.step_a.is_some_and(|s| !(s > 0.0)) {
            return Err(LandError::invalid("stepsizes must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(LandError::invalid("tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(LandError::invalid("max_iter must be at least 1"));
        }
        self.solver.validate()?;
        self.mc_solver.validate()
    }
}

/// Result of [`fit_mle`].
#[derive(Debug, Clone)]
pub struct LandFit {
    /// The iterate with the lowest objective, with its normalization constant.
    pub params: LandParams,
    /// Objective after every full iteration, starting with the initial value.
    pub trace: Vec<f64>,
    pub best_objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Empirical tangent covariance, ridged slightly so that a degenerate
/// sample still gives a usable starting point.
pub(crate) fn ridged_covariance(logs: &LogMaps) -> Result<DMatrix<f64>> {
    let mut s = covariance_from_logs(logs)?;
    let d = s.nrows();
    let ridge = 1e-9 * (s.trace() / d as f64).max(1e-300);
    for i in 0..d {
        s[(i, i)] += ridge;
    }
    Ok(s)
}

/// Initial (mean, covariance) of a single LAND.
pub fn initialize(data: &DataMatrix, metric: &dyn Metric, cfg: &FitConfig) -> Result<LandParams> {
    let mean = match cfg.init {
        InitStrategy::Random => {
            let mut r = rng::stream(cfg.rng_seed, &[purpose::INIT]);
            data.row(r.random_range(0..data.n_rows())).to_vec()
        }
        InitStrategy::LeastSquares => {
            let ls = IntrinsicMeanConfig { solver: cfg.solver, ..Default::default() };
            intrinsic_mean(data, metric, &ls)?.mean
        }
        InitStrategy::Gmm => data.mean(),
    };
    let logs = LogMaps::compute(metric, &mean, data, None, &cfg.solver);
    logs.check()?;
    LandParams::from_covariance(mean, ridged_covariance(&logs)?)
}

/// Maximum-likelihood fit of a single LAND from the configured initialization.
pub fn fit_mle(data: &DataMatrix, metric: &dyn Metric, cfg: &FitConfig) -> Result<LandFit> {
    cfg.validate()?;
    if data.n_rows() < 2 {
        return Err(LandError::invalid("fitting needs at least two points"));
    }
    if data.dim() != metric.dim() {
        return Err(LandError::DimensionMismatch { expected: metric.dim(), got: data.dim() });
    }
    let init = initialize(data, metric, cfg)?;
    fit_mle_from(data, metric, init, cfg)
}

/// Maximum-likelihood fit from given initial parameters.
///
/// Each iteration: a steepest-descent step on the mean along the geodesic,
/// re-estimation of C at the new mean, then a gradient step on A. Every C
/// estimate uses fresh samples; the estimate at (mu_{t+1}, Sigma_{t+1})
/// also serves as the first estimate of the next iteration. Stepsizes shrink
/// by 0.75 when their update raised the objective and grow by 1.1 otherwise.
pub fn fit_mle_from(data: &DataMatrix, metric: &dyn Metric, init: LandParams, cfg: &FitConfig) -> Result<LandFit> {
    cfg.validate()?;
    let solver = &cfg.solver;
    let mc_solver = &cfg.mc_solver;
    let s = cfg.mc_samples;
    let seed = cfg.rng_seed;
    let mc_key = |iter: usize, half: u64| [purpose::MC_SAMPLES, 0, iter as u64, half];

    let mut params = init;
    let mut step_mu = cfg.step_mu;
    let mut step_a = cfg.step_a.unwrap_or_else(|| 0.25 / linalg::max_eigenvalue(params.sigma()));

    let mut logs = LogMaps::compute(metric, params.mu(), data, None, solver);
    logs.check()?;
    let mut mc = normalization_constant(metric, params.mu(), params.sigma(), s, seed, &mc_key(0, 0), mc_solver)?;
    params = params.with_norm_const(mc.norm_const());
    let mut phi = objective_from_logs(&logs, &params)?;

    let mut trace = vec![phi];
    let mut best = (phi, params.clone());
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..cfg.max_iter {
        iterations = t + 1;

        // Mean step.
        let d = descent_direction_mu(&logs, &params, &mc);
        let step: Vec<f64> = d.iter().map(|v| step_mu * v).collect();
        let (mid_logs, mid_params, mid_mc, phi_mid) = match exp_endpoint(metric, params.mu(), &step, solver) {
            Ok(new_mu) => {
                let new_logs = LogMaps::compute(metric, &new_mu, data, Some(&logs), solver);
                new_logs.check()?;
                let p = LandParams::from_factor(new_mu, params.a().clone())?;
                let new_mc = normalization_constant(metric, p.mu(), p.sigma(), s, seed, &mc_key(t, 1), mc_solver)?;
                let p = p.with_norm_const(new_mc.norm_const());
                let phi_mid = objective_from_logs(&new_logs, &p)?;
                (new_logs, p, new_mc, phi_mid)
            }
            Err(e) => {
                warn!("mean update failed to integrate ({e}); keeping the current mean");
                (logs.clone(), params.clone(), mc.clone(), f64::INFINITY)
            }
        };
        step_mu *= if phi_mid > phi { 0.75 } else { 1.1 };
        let phi_mid = if phi_mid.is_finite() { phi_mid } else { phi };

        // Covariance step.
        let g = grad_a(&mid_logs, &mid_params, &mid_mc);
        let new_a = mid_params.a() - g * step_a;
        let new_params = LandParams::from_factor(mid_params.mu().to_vec(), new_a)?;
        let new_mc = normalization_constant(metric, new_params.mu(), new_params.sigma(), s, seed, &mc_key(t + 1, 0), mc_solver)?;
        let new_params = new_params.with_norm_const(new_mc.norm_const());
        let phi_new = objective_from_logs(&mid_logs, &new_params)?;
        step_a *= if phi_new > phi_mid { 0.75 } else { 1.1 };

        debug!("iteration {t}: phi {phi_new:.6} (mid {phi_mid:.6}), steps mu {step_mu:.4} A {step_a:.4}");
        trace.push(phi_new);
        if phi_new < best.0 {
            best = (phi_new, new_params.clone());
        }
        let change = phi_new - phi;
        params = new_params;
        logs = mid_logs;
        mc = new_mc;
        phi = phi_new;
        if change * change <= cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(LandFit { params: best.1, trace, best_objective: best.0, converged, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Proposals per returned sample; at least 10.
    pub oversampling: usize,
    pub solver: GeodesicSolverConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { oversampling: 10, solver: GeodesicSolverConfig::sampling() }
    }
}

/// Approximate sampling by self-normalised importance resampling: tangent
/// proposals v ~ N(0, Sigma) weighted by m(mu, v), systematically resampled
/// and mapped through the exponential map.
pub fn sample(
    params: &LandParams,
    metric: &dyn Metric,
    n: usize,
    seed: u64,
    counters: &[u64],
    cfg: &SamplingConfig,
) -> Result<DataMatrix> {
    if cfg.oversampling < 10 {
        return Err(LandError::invalid("oversampling factor must be at least 10"));
    }
    if n == 0 {
        return Err(LandError::invalid("need at least one sample"));
    }
    let mut key = vec![purpose::SAMPLING];
    key.extend_from_slice(counters);
    let proposals = draw_tangents(params.sigma(), n * cfg.oversampling, seed, &key)?;
    let mapped: Vec<Option<(Vec<f64>, f64)>> = proposals
        .par_iter()
        .map(|v| {
            let end = exp_endpoint(metric, params.mu(), v, &cfg.solver).ok()?;
            let m = metric.measure_density(&end).ok()?;
            m.is_finite().then_some((end, m))
        })
        .collect();
    let kept: Vec<(Vec<f64>, f64)> = mapped.into_iter().flatten().collect();
    let total: f64 = kept.iter().map(|(_, w)| w).sum();
    let sq: f64 = kept.iter().map(|(_, w)| w * w).sum();
    let ess = if sq > 0.0 { total * total / sq } else { 0.0 };
    if ess < n as f64 {
        return Err(LandError::DegenerateWeights { ess, needed: n });
    }
    key.push(u64::MAX);
    let u0: f64 = rng::stream(seed, &key).random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n * params.dim());
    let mut cum = 0.0;
    let mut j = 0;
    for i in 0..n {
        let target = (u0 + i as f64 / n as f64) * total;
        while j + 1 < kept.len() && cum + kept[j].1 < target {
            cum += kept[j].1;
            j += 1;
        }
        out.extend_from_slice(&kept[j].0);
    }
    DataMatrix::new(n, params.dim(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{learn_metric, ConstantMetric, MetricParams};
    use approx::assert_relative_eq;

    fn solver() -> GeodesicSolverConfig {
        GeodesicSolverConfig::default()
    }

    fn sigma2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])
    }

    fn arc_data(n: usize) -> DataMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = std::f64::consts::PI * i as f64 / (n - 1) as f64;
                vec![t.cos() + 0.03 * (i as f64 * 1.7).sin(), 0.5 * t.sin() + 0.03 * (i as f64 * 2.3).cos()]
            })
            .collect();
        DataMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn identity_metric_constant_is_z() {
        let m = ConstantMetric::identity(2);
        let mc = normalization_constant(&m, &[0.3, -0.2], &sigma2(), 200, 1, &[9], &solver()).unwrap();
        let z = (2.0 * std::f64::consts::PI) * sigma2().determinant().sqrt();
        assert_relative_eq!(mc.estimate(), z, max_relative = 1e-12);
        assert_eq!(mc.failed, 0);
    }

    #[test]
    fn constant_metric_scales_constant() {
        let m = ConstantMetric::new(vec![4.0, 4.0, 4.0]).unwrap();
        let sigma = DMatrix::identity(3, 3) * 0.2;
        let mc = normalization_constant(&m, &[0.0; 3], &sigma, 64, 3, &[], &solver()).unwrap();
        let z = (2.0 * std::f64::consts::PI * 0.2f64).powf(1.5);
        assert_relative_eq!(mc.estimate(), z * 8.0, max_relative = 1e-12);
    }

    #[test]
    fn tangents_are_antithetic_and_moment_matched() {
        let s = sigma2();
        let v = draw_tangents(&s, 100, 5, &[1, 2]).unwrap();
        assert_eq!(v.len(), 100);
        for p in v.chunks(2) {
            assert_eq!(p[0][0], -p[1][0]);
            assert_eq!(p[0][1], -p[1][1]);
        }
        let mut second = DMatrix::zeros(2, 2);
        for x in &v {
            linalg::outer_add(&mut second, x, 1.0 / 100.0);
        }
        assert_relative_eq!(second, s, epsilon = 1e-12);
        assert_eq!(v, draw_tangents(&s, 100, 5, &[1, 2]).unwrap());
        assert_ne!(v, draw_tangents(&s, 100, 6, &[1, 2]).unwrap());
        assert_eq!(draw_tangents(&s, 7, 5, &[]).unwrap().len(), 7);
    }

    #[test]
    fn rank_loss_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, 1.0]);
        assert!(matches!(LandParams::from_factor(vec![0.0, 0.0], a), Err(LandError::RankLoss(_))));
    }

    #[test]
    fn factor_roundtrips_covariance() {
        let p = LandParams::from_covariance(vec![0.0, 1.0], sigma2()).unwrap();
        assert_relative_eq!(p.a().transpose() * p.a() * p.sigma(), DMatrix::identity(2, 2), epsilon = 1e-12);
        let log_z = 0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + sigma2().determinant().ln());
        assert_relative_eq!(p.log_z(), log_z, epsilon = 1e-12);
    }

    /// phi(A) with the data logs and MC tangents frozen; the normalization
    /// constant is the importance-weighted estimate over samples drawn at
    /// the base covariance, which equals the plain estimate at A = A_0.
    fn frozen_phi(a: &DMatrix<f64>, logs: &LogMaps, mc: &McSamples, sigma0: &DMatrix<f64>) -> f64 {
        let prec = a.transpose() * a;
        let n = logs.succeeded().count() as f64;
        let data: f64 = logs.succeeded().map(|(_, l)| linalg::quad_form(&prec, l)).sum::<f64>() / (2.0 * n);
        let prec0 = linalg::spd_inverse(sigma0).unwrap();
        let s = mc.tangents.len() as f64;
        let c: f64 = mc
            .tangents
            .iter()
            .zip(&mc.measures)
            .map(|(v, m)| m * (-0.5 * linalg::quad_form(&prec, v) + 0.5 * linalg::quad_form(&prec0, v) + mc.log_z).exp())
            .sum::<f64>()
            / s;
        data + c.ln()
    }

    #[test]
    fn covariance_gradient_matches_finite_differences_on_learned_metric() {
        let data = arc_data(40);
        let metric = learn_metric(data.clone(), MetricParams::new(0.3, 0.05).unwrap()).unwrap();
        let mu = vec![0.1, 0.45];
        let sigma0 = DMatrix::from_row_slice(2, 2, &[0.4, 0.05, 0.05, 0.1]);
        let params = LandParams::from_covariance(mu.clone(), sigma0.clone()).unwrap();
        let logs = LogMaps::compute(&metric, &mu, &data, None, &solver());
        let mc = normalization_constant(&metric, &mu, &sigma0, 400, 11, &[], &solver()).unwrap();
        let params = params.with_norm_const(mc.norm_const());
        assert_relative_eq!(frozen_phi(params.a(), &logs, &mc, &sigma0), objective_from_logs(&logs, &params).unwrap(), epsilon = 1e-10);

        let g = grad_a(&logs, &params, &mc);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut ap = params.a().clone();
                let mut am = params.a().clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                let fd = (frozen_phi(&ap, &logs, &mc, &sigma0) - frozen_phi(&am, &logs, &mc, &sigma0)) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() <= 1e-3 * g.abs().max().max(1e-8), "({i},{j}): fd {fd} vs {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn mean_gradient_matches_finite_differences_under_constant_metric() {
        let data = arc_data(25);
        let metric = ConstantMetric::new(vec![2.0, 0.5]).unwrap();
        let sigma = sigma2();
        // Finite differences amplify shooting residuals; solve to near machine precision.
        let tight = GeodesicSolverConfig { bvp_tol: 1e-13, ..solver() };
        let phi = |mu: &[f64]| {
            let p = LandParams::from_covariance(mu.to_vec(), sigma.clone()).unwrap();
            let logs = LogMaps::compute(&metric, mu, &data, None, &tight);
            let mc = normalization_constant(&metric, mu, &sigma, 50, 2, &[], &solver()).unwrap();
            objective_from_logs(&logs, &p.with_norm_const(mc.norm_const())).unwrap()
        };
        let mu = vec![0.2, 0.1];
        let p = LandParams::from_covariance(mu.clone(), sigma.clone()).unwrap();
        let logs = LogMaps::compute(&metric, &mu, &data, None, &tight);
        let mc = normalization_constant(&metric, &mu, &sigma, 50, 2, &[], &solver()).unwrap();
        let g = grad_mu(&logs, &p, &mc);
        let h = 1e-5;
        for k in 0..2 {
            let mut up = mu.clone();
            let mut dn = mu.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (phi(&up) - phi(&dn)) / (2.0 * h);
            assert_relative_eq!(fd, g[k], max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn euclidean_fit_recovers_gaussian_mle() {
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let a = (i as f64 * 0.61).sin() * 1.3;
                let b = (i as f64 * 1.37).cos() * 0.4;
                vec![1.0 + a + 0.5 * b, -2.0 + b]
            })
            .collect();
        let data = DataMatrix::from_rows(&rows).unwrap();
        let metric = ConstantMetric::identity(2);
        let cfg = FitConfig { mc_samples: 100, tol: 1e-16, max_iter: 400, ..Default::default() };
        let fit = fit_mle(&data, &metric, &cfg).unwrap();
        let mean = data.mean();
        let mut cov = DMatrix::zeros(2, 2);
        for x in data.rows() {
            let d: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
            linalg::outer_add(&mut cov, &d, 1.0 / 200.0);
        }
        for k in 0..2 {
            assert!((fit.params.mu()[k] - mean[k]).abs() < 1e-4, "{:?} vs {mean:?}", fit.params.mu());
        }
        let err = (fit.params.sigma() - &cov).norm() / cov.norm();
        assert!(err < 1e-3, "relative covariance error {err}");
        assert!(fit.best_objective <= fit.trace[0]);
    }

    #[test]
    fn fit_is_deterministic_and_keeps_best() {
        let data = arc_data(30);
        let metric = learn_metric(data.clone(), MetricParams::new(0.3, 0.05).unwrap()).unwrap();
        let cfg = FitConfig { mc_samples: 100, max_iter: 4, ..Default::default() };
        let a = fit_mle(&data, &metric, &cfg).unwrap();
        let b = fit_mle(&data, &metric, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        let min = a.trace.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_objective, min);
        assert!(a.best_objective <= a.trace[0]);
    }

    #[test]
    fn euclidean_sampling_matches_moments() {
        let metric = ConstantMetric::identity(2);
        let p = LandParams::from_covariance(vec![1.0, -1.0], sigma2()).unwrap();
        let x = sample(&p, &metric, 2000, 4, &[], &SamplingConfig::default()).unwrap();
        let m = x.mean();
        assert!((m[0] - 1.0).abs() < 0.05 && (m[1] + 1.0).abs() < 0.05, "{m:?}");
    }

    #[test]
    fn sampling_rejects_low_oversampling() {
        let metric = ConstantMetric::identity(2);
        let p = LandParams::from_covariance(vec![0.0, 0.0], sigma2()).unwrap();
        let cfg = SamplingConfig { oversampling: 5, ..Default::default() };
        assert!(sample(&p, &metric, 10, 0, &[], &cfg).is_err());
    }

    #[test]
    fn log_density_needs_constant() {
        let metric = ConstantMetric::identity(2);
        let p = LandParams::from_covariance(vec![0.0, 0.0], sigma2()).unwrap();
        assert!(log_density(&p, &metric, &[0.1, 0.1], &solver()).is_err());
        let mc = normalization_constant(&metric, p.mu(), p.sigma(), 10, 0, &[], &solver()).unwrap();
        let p = p.with_norm_const(mc.norm_const());
        let x = [0.3, -0.2];
        let expected = -0.5 * linalg::quad_form(p.precision(), &x) - p.log_z();
        assert_relative_eq!(log_density(&p, &metric, &x, &solver()).unwrap(), expected, epsilon = 1e-9);
    }
}
