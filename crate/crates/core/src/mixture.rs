//! Mixtures of LANDs fitted by EM with single-gradient-step M-steps.

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::Rng;

use crate::baselines::{argmax, gmm_fit, riemannian_kmeans, GmmConfig, IntrinsicMeanConfig, KMeansConfig};
use crate::data::DataMatrix;
use crate::error::{LandError, Result};
use crate::eval::log_sum_exp;
use crate::geodesic::{exp_endpoint, GeodesicSolverConfig};
use crate::land::{self, ridged_covariance, weighted_directions, weighted_objective, FitConfig, InitStrategy, LandParams, LogMaps, McSamples, SamplingConfig};
use crate::linalg;
use crate::metric::Metric;
use crate::rng::{self, purpose};

/// Component weights and parameters of a LAND mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct LandMixture {
    weights: Vec<f64>,
    components: Vec<LandParams>,
}

impl LandMixture {
    /// Weights must be non-negative and sum to one within 1e-9; they are
    /// renormalised exactly.
    pub fn new(weights: Vec<f64>, components: Vec<LandParams>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(LandError::invalid("need one weight per component and at least one component"));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(LandError::invalid("components have different dimensions"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(LandError::invalid("mixture weights must lie on the simplex"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { weights, components })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[LandParams] {
        &self.components
    }

    /// Log maps of `data` from every component mean.
    pub fn log_maps(&self, metric: &dyn Metric, data: &DataMatrix, cfg: &GeodesicSolverConfig) -> Vec<LogMaps> {
        self.components.iter().map(|c| LogMaps::compute(metric, c.mu(), data, None, cfg)).collect()
    }

    /// ln(pi_k p_k(x_n)) for every point and component; -inf where the log
    /// map failed.
    pub fn joint_log_terms(&self, logs: &[LogMaps]) -> Result<Vec<Vec<f64>>> {
        let log_c = self.components.iter().map(|c| c.log_norm_const()).collect::<Result<Vec<_>>>()?;
        let n = logs[0].tangents.len();
        Ok((0..n)
            .map(|i| {
                (0..self.k())
                    .map(|k| match &logs[k].tangents[i] {
                        Some(v) => {
                            self.weights[k].ln() - 0.5 * linalg::quad_form(self.components[k].precision(), v) - log_c[k]
                        }
                        None => f64::NEG_INFINITY,
                    })
                    .collect()
            })
            .collect())
    }

    /// Per-point mixture log densities; points where every component failed
    /// are `None`.
    pub fn log_densities(&self, logs: &[LogMaps]) -> Result<Vec<Option<f64>>> {
        Ok(self
            .joint_log_terms(logs)?
            .iter()
            .map(|t| {
                let l = log_sum_exp(t);
                l.is_finite().then_some(l)
            })
            .collect())
    }

    /// Sum of log densities over the points that could be evaluated, and the
    /// number of points skipped.
    pub fn log_likelihood(&self, metric: &dyn Metric, data: &DataMatrix, cfg: &GeodesicSolverConfig) -> Result<(f64, usize)> {
        let logs = self.log_maps(metric, data, cfg);
        let dens = self.log_densities(&logs)?;
        let skipped = dens.iter().filter(|d| d.is_none()).count();
        Ok((dens.into_iter().flatten().sum(), skipped))
    }

    /// Approximate samples: component counts drawn from the weights, then
    /// importance resampling within each component.
    pub fn sample(&self, metric: &dyn Metric, n: usize, seed: u64, cfg: &SamplingConfig) -> Result<DataMatrix> {
        let mut r = rng::stream(seed, &[purpose::SAMPLING, u64::MAX]);
        let mut counts = vec![0usize; self.k()];
        for _ in 0..n {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut pick = self.k() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            counts[pick] += 1;
        }
        let mut values = Vec::with_capacity(n * self.dim());
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                let x = land::sample(&self.components[k], metric, c, seed, &[k as u64], cfg)?;
                values.extend_from_slice(x.as_slice());
            }
        }
        DataMatrix::new(n, self.dim(), values)
    }
}

/// Posterior component probabilities, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    rows: Vec<Vec<f64>>,
}

impl Responsibilities {
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }

    /// R_k = sum_n r_nk.
    pub fn totals(&self) -> Vec<f64> {
        let k = self.rows.first().map_or(0, |r| r.len());
        (0..k).map(|j| self.rows.iter().map(|r| r[j]).sum()).collect()
    }

    /// Most responsible component per point (ties to the lowest index).
    pub fn assignments(&self) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(r)).collect()
    }
}

/// Responsibilities from precomputed log maps, normalised in log space.
pub fn responsibilities_from_logs(mix: &LandMixture, logs: &[LogMaps]) -> Result<Responsibilities> {
    let terms = mix.joint_log_terms(logs)?;
    let k = mix.k();
    let mut uniform = 0;
    let rows = terms
        .iter()
        .map(|t| {
            let lse = log_sum_exp(t);
            if lse.is_finite() {
                t.iter().map(|v| (v - lse).exp()).collect()
            } else {
                uniform += 1;
                vec![1.0 / k as f64; k]
            }
        })
        .collect();
    if uniform > 0 {
        warn!("{uniform} points have zero likelihood under every component; their responsibilities are uniform");
    }
    Ok(Responsibilities { rows })
}

pub fn e_step(data: &DataMatrix, mix: &LandMixture, metric: &dyn Metric, cfg: &GeodesicSolverConfig) -> Result<Responsibilities> {
    responsibilities_from_logs(mix, &mix.log_maps(metric, data, cfg))
}

/// Directions of one component, unnormalised:
/// d_mu = sum_n r_n Log(x_n) - (Z R / (C S)) sum_s m_s v_s and
/// grad_A = A [ sum_n r_n L L^T - (Z R / (C S)) sum_s m_s v_s v_s^T ],
/// with R the total responsibility over the points whose log map succeeded.
pub fn m_step_gradients(logs: &LogMaps, r: &[f64], params: &LandParams, mc: &McSamples) -> (Vec<f64>, DMatrix<f64>) {
    let (d, g, _) = weighted_directions(logs, r, params, mc);
    (d, g)
}

/// psi = sum_k sum_n r_nk [ 1/2 <L, Sigma_k^-1 L> + ln C_k - ln pi_k ].
pub fn psi_objective(mix: &LandMixture, logs: &[LogMaps], resp: &Responsibilities) -> Result<f64> {
    let mut total = 0.0;
    for (k, comp) in mix.components().iter().enumerate() {
        let (sum, rk) = weighted_objective(&logs[k], &resp.column(k), comp)?;
        total += sum - mix.weights[k].ln() * rk;
    }
    Ok(total)
}

/// The single-LAND objective with weights r: psi_k / R_k.
fn component_phi(params: &LandParams, logs: &LogMaps, r: &[f64]) -> Result<f64> {
    let (sum, total) = weighted_objective(logs, r, params)?;
    Ok(sum / total)
}

/// Initial mixture for the configured strategy.
pub fn initialize(data: &DataMatrix, metric: &dyn Metric, k: usize, cfg: &FitConfig) -> Result<LandMixture> {
    if k == 1 {
        return LandMixture::new(vec![1.0], vec![land::initialize(data, metric, cfg)?]);
    }
    let n = data.n_rows();
    let (centers, assign, weights): (Vec<Vec<f64>>, Vec<usize>, Option<Vec<f64>>) = match cfg.init {
        InitStrategy::Gmm => {
            let g = gmm_fit(data, k, &GmmConfig { seed: cfg.rng_seed, ..Default::default() })?;
            let a = g.assignments(data)?;
            (g.means.clone(), a, Some(g.weights.clone()))
        }
        InitStrategy::LeastSquares => {
            // Centers only seed the EM, so the inner means are solved loosely.
            let mean = IntrinsicMeanConfig { tol: 1e-3 * data.scale(), max_iter: 20, solver: cfg.mc_solver, ..Default::default() };
            let km = KMeansConfig { restarts: cfg.kmeans_restarts, seed: cfg.rng_seed, mean, ..Default::default() };
            let r = riemannian_kmeans(data, metric, k, &km)?;
            (r.centers, r.assignments, None)
        }
        InitStrategy::Random => {
            let mut r = rng::stream(cfg.rng_seed, &[purpose::INIT]);
            let idx = rand::seq::index::sample(&mut r, n, k).into_vec();
            let centers: Vec<Vec<f64>> = idx.iter().map(|&i| data.row(i).to_vec()).collect();
            let logs: Vec<LogMaps> = centers.iter().map(|c| LogMaps::compute(metric, c, data, None, &cfg.solver)).collect();
            let assign = (0..n)
                .map(|i| {
                    let d: Vec<f64> = (0..k)
                        .map(|j| match &logs[j].tangents[i] {
                            Some(v) => -metric.squared_norm(&centers[j], v).unwrap_or(f64::INFINITY),
                            None => f64::NEG_INFINITY,
                        })
                        .collect();
                    argmax(&d)
                })
                .collect();
            (centers, assign, None)
        }
    };
    let mut comps = Vec::with_capacity(k);
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    for (j, c) in centers.into_iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
        // Too few members for a covariance: fall back to all the data.
        let subset = if members.len() >= 2 { data.select(&members)? } else { data.clone() };
        let logs = LogMaps::compute(metric, &c, &subset, None, &cfg.solver);
        logs.check()?;
        comps.push(LandParams::from_covariance(c, ridged_covariance(&logs)?)?);
    }
    let weights = weights.unwrap_or_else(|| counts.iter().map(|&c| (c.max(1)) as f64).collect());
    let total: f64 = weights.iter().sum();
    LandMixture::new(weights.into_iter().map(|w| w / total).collect(), comps)
}

/// Result of [`em_fit`].
#[derive(Debug, Clone)]
pub struct MixtureFit {
    /// The iterate with the lowest psi, with normalization constants.
    pub mixture: LandMixture,
    /// psi / N after every iteration, starting with the initial value.
    pub trace: Vec<f64>,
    pub best_objective: f64,
    pub responsibilities: Responsibilities,
    pub converged: bool,
    pub iterations: usize,
}

struct ComponentState {
    params: LandParams,
    logs: LogMaps,
    mc: McSamples,
    step_mu: f64,
    step_a: f64,
}

/// EM for a mixture of LANDs from the configured initialization.
pub fn em_fit(data: &DataMatrix, metric: &dyn Metric, k: usize, cfg: &FitConfig) -> Result<MixtureFit> {
    cfg.validate()?;
    if k == 0 || k > data.n_rows() {
        return Err(LandError::invalid(format!("need 1 <= K <= N, got K = {k}, N = {}", data.n_rows())));
    }
    if data.dim() != metric.dim() {
        return Err(LandError::DimensionMismatch { expected: metric.dim(), got: data.dim() });
    }
    let init = initialize(data, metric, k, cfg)?;
    em_fit_from(data, metric, init, cfg)
}

/// EM from given initial parameters. Each iteration computes the
/// responsibilities, then for every component in turn takes one mean step
/// and one covariance step exactly as the single-LAND fit does, with the
/// data sums weighted by r_nk and divided by R_k, and finally sets
/// pi_k = R_k / N. Components whose total responsibility drops below 1e-8
/// are moved to the point of lowest mixture density.
pub fn em_fit_from(data: &DataMatrix, metric: &dyn Metric, init: LandMixture, cfg: &FitConfig) -> Result<MixtureFit> {
    cfg.validate()?;
    let solver = &cfg.solver;
    let mc_solver = &cfg.mc_solver;
    let s = cfg.mc_samples;
    let seed = cfg.rng_seed;
    let n = data.n_rows() as f64;
    let k = init.k();
    let mc_key = |comp: usize, iter: usize, half: u64| [purpose::MC_SAMPLES, comp as u64, iter as u64, half];

    let mut weights = init.weights.clone();
    let mut states = Vec::with_capacity(k);
    for (j, p) in init.components.into_iter().enumerate() {
        let logs = LogMaps::compute(metric, p.mu(), data, None, solver);
        logs.check()?;
        let mc = land::normalization_constant(metric, p.mu(), p.sigma(), s, seed, &mc_key(j, 0, 0), mc_solver)?;
        let step_a = cfg.step_a.unwrap_or_else(|| 0.25 / linalg::max_eigenvalue(p.sigma()));
        states.push(ComponentState { params: p.with_norm_const(mc.norm_const()), logs, mc, step_mu: cfg.step_mu, step_a });
    }
    let current = |states: &[ComponentState], weights: &[f64]| {
        LandMixture::new(weights.to_vec(), states.iter().map(|c| c.params.clone()).collect())
    };
    let logs_of = |states: &[ComponentState]| states.iter().map(|c| c.logs.clone()).collect::<Vec<_>>();

    let mut mix = current(&states, &weights)?;
    let mut resp = responsibilities_from_logs(&mix, &logs_of(&states))?;
    let mut psi = psi_objective(&mix, &logs_of(&states), &resp)? / n;
    let mut trace = vec![psi];
    let mut best = (psi, mix.clone(), resp.clone());
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..cfg.max_iter {
        iterations = t + 1;
        let totals = resp.totals();
        for j in 0..k {
            if totals[j] < 1e-8 {
                reseed(metric, data, &mix, &mut states[j], j, t, cfg)?;
                continue;
            }
            let r = resp.column(j);
            let st = &mut states[j];
            let phi = component_phi(&st.params, &st.logs, &r)?;

            // Mean step.
            let (d, _, rk) = weighted_directions(&st.logs, &r, &st.params, &st.mc);
            let step: Vec<f64> = d.iter().map(|v| st.step_mu * (v / rk)).collect();
            let (mid_logs, mid_params, mid_mc, phi_mid) = match exp_endpoint(metric, st.params.mu(), &step, solver) {
                Ok(new_mu) => {
                    let new_logs = LogMaps::compute(metric, &new_mu, data, Some(&st.logs), solver);
                    new_logs.check()?;
                    let p = LandParams::from_factor(new_mu, st.params.a().clone())?;
                    let new_mc = land::normalization_constant(metric, p.mu(), p.sigma(), s, seed, &mc_key(j, t, 1), mc_solver)?;
                    let p = p.with_norm_const(new_mc.norm_const());
                    let phi_mid = component_phi(&p, &new_logs, &r)?;
                    (new_logs, p, new_mc, phi_mid)
                }
                Err(e) => {
                    warn!("mean update of component {j} failed to integrate ({e}); keeping its mean");
                    (st.logs.clone(), st.params.clone(), st.mc.clone(), f64::INFINITY)
                }
            };
            st.step_mu *= if phi_mid > phi { 0.75 } else { 1.1 };
            let phi_mid = if phi_mid.is_finite() { phi_mid } else { phi };

            // Covariance step.
            let (_, g, rk_mid) = weighted_directions(&mid_logs, &r, &mid_params, &mid_mc);
            let new_a = mid_params.a() - (g / rk_mid) * st.step_a;
            let new_params = LandParams::from_factor(mid_params.mu().to_vec(), new_a)?;
            let new_mc = land::normalization_constant(metric, new_params.mu(), new_params.sigma(), s, seed, &mc_key(j, t + 1, 0), mc_solver)?;
            let new_params = new_params.with_norm_const(new_mc.norm_const());
            let phi_new = component_phi(&new_params, &mid_logs, &r)?;
            st.step_a *= if phi_new > phi_mid { 0.75 } else { 1.1 };

            st.params = new_params;
            st.logs = mid_logs;
            st.mc = new_mc;
        }
        weights = totals.iter().map(|r| r / n).collect();
        mix = current(&states, &weights)?;
        let logs = logs_of(&states);
        resp = responsibilities_from_logs(&mix, &logs)?;
        let psi_new = psi_objective(&mix, &logs, &resp)? / n;
        debug!("EM iteration {t}: psi/N {psi_new:.6}");
        trace.push(psi_new);
        if psi_new < best.0 {
            best = (psi_new, mix.clone(), resp.clone());
        }
        let change = psi_new - psi;
        psi = psi_new;
        if change * change <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(MixtureFit { mixture: best.1, trace, best_objective: best.0, responsibilities: best.2, converged, iterations })
}

/// Moves an empty component to the point with the lowest mixture density.
fn reseed(
    metric: &dyn Metric,
    data: &DataMatrix,
    mix: &LandMixture,
    st: &mut ComponentState,
    j: usize,
    t: usize,
    cfg: &FitConfig,
) -> Result<()> {
    let logs: Vec<LogMaps> = mix.components.iter().map(|c| LogMaps::compute(metric, c.mu(), data, None, &cfg.solver)).collect();
    let dens = mix.log_densities(&logs)?;
    let worst = dens
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.1.unwrap_or(f64::NEG_INFINITY)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    warn!("component {j} lost all responsibility; re-seeding it at point {worst}");
    let mu = data.row(worst).to_vec();
    let p = LandParams::from_factor(mu, st.params.a().clone())?;
    let logs = LogMaps::compute(metric, p.mu(), data, None, &cfg.solver);
    logs.check()?;
    let mc = land::normalization_constant(
        metric,
        p.mu(),
        p.sigma(),
        cfg.mc_samples,
        cfg.rng_seed,
        &[purpose::RESEED, j as u64, t as u64],
        &cfg.mc_solver,
    )?;
    st.params = p.with_norm_const(mc.norm_const());
    st.logs = logs;
    st.mc = mc;
    st.step_mu = cfg.step_mu;
    st.step_a = cfg.step_a.unwrap_or_else(|| 0.25 / linalg::max_eigenvalue(st.params.sigma()));
    Ok(())
}

/// The least-squares comparator: Riemannian K-means centers, intrinsic
/// covariances of each cluster, cluster-size weights, and normalization
/// constants estimated like the LAND's.
pub fn ls_mixture(
    data: &DataMatrix,
    metric: &dyn Metric,
    k: usize,
    kmeans: &KMeansConfig,
    mc_samples: usize,
    mc_solver: &GeodesicSolverConfig,
    seed: u64,
) -> Result<LandMixture> {
    let solver = &kmeans.mean.solver;
    let (centers, assign) = if k == 1 {
        (vec![crate::baselines::intrinsic_mean(data, metric, &kmeans.mean)?.mean], vec![0; data.n_rows()])
    } else {
        let r = riemannian_kmeans(data, metric, k, kmeans)?;
        (r.centers, r.assignments)
    };
    let n = data.n_rows();
    let mut comps = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for (j, c) in centers.into_iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
        weights.push(members.len().max(1) as f64);
        let subset = if members.len() >= 2 { data.select(&members)? } else { data.clone() };
        let logs = LogMaps::compute(metric, &c, &subset, None, solver);
        logs.check()?;
        let p = LandParams::from_covariance(c, ridged_covariance(&logs)?)?;
        let mc = land::normalization_constant(metric, p.mu(), p.sigma(), mc_samples, seed, &[purpose::MC_SAMPLES, j as u64, u64::MAX, 0], mc_solver)?;
        comps.push(p.with_norm_const(mc.norm_const()));
    }
    let total: f64 = weights.iter().sum();
    LandMixture::new(weights.into_iter().map(|w| w / total).collect(), comps)
}
