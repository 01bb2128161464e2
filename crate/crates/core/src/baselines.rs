//! Comparators: intrinsic least-squares mean and covariance, Riemannian
//! K-means and a Euclidean Gaussian mixture fitted by EM.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{LandError, Result};
use crate::eval::log_sum_exp;
use crate::geodesic::{exp_endpoint, GeodesicSolverConfig};
use crate::land::LogMaps;
use crate::linalg;
use crate::metric::Metric;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicMeanConfig {
    /// Initial step t in mu <- Exp_mu(t v / N); halved whenever a step raises
    /// the variance.
    pub step: f64,
    /// Stop when the mean tangent ||v|| / N falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: GeodesicSolverConfig,
}

impl Default for IntrinsicMeanConfig {
    fn default() -> Self {
        Self { step: 1.0, tol: 1e-4, max_iter: 100, solver: GeodesicSolverConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicEstimate {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
}

/// Variance sum_n ||Log_mu(x_n)||^2_{M(mu)} / N_ok and the mean tangent.
fn variance_and_direction(metric: &dyn Metric, logs: &LogMaps) -> Result<(f64, Vec<f64>)> {
    logs.check()?;
    let d = logs.base.len();
    let mut var = 0.0;
    let mut dir = vec![0.0; d];
    let mut n = 0usize;
    for (_, l) in logs.succeeded() {
        var += metric.squared_norm(&logs.base, l)?;
        for (a, b) in dir.iter_mut().zip(l) {
            *a += b;
        }
        n += 1;
    }
    dir.iter_mut().for_each(|v| *v /= n as f64);
    Ok((var / n as f64, dir))
}

/// Variance-minimising (Frechet) mean by Riemannian gradient descent,
/// started at the Euclidean mean.
pub fn intrinsic_mean(data: &DataMatrix, metric: &dyn Metric, cfg: &IntrinsicMeanConfig) -> Result<IntrinsicEstimate> {
    intrinsic_mean_from(data, metric, &data.mean(), cfg)
}

pub fn intrinsic_mean_from(
    data: &DataMatrix,
    metric: &dyn Metric,
    start: &[f64],
    cfg: &IntrinsicMeanConfig,
) -> Result<IntrinsicEstimate> {
    if data.dim() != metric.dim() || start.len() != metric.dim() {
        return Err(LandError::DimensionMismatch { expected: metric.dim(), got: data.dim() });
    }
    if !(cfg.step > 0.0) || !(cfg.tol > 0.0) {
        return Err(LandError::invalid("step and tolerance must be positive"));
    }
    let solver = &cfg.solver;
    let mut mu = start.to_vec();
    let mut logs = LogMaps::compute(metric, &mu, data, None, solver);
    let (mut var, mut dir) = variance_and_direction(metric, &logs)?;
    let mut step = cfg.step;
    let mut iterations = 0;
    while iterations < cfg.max_iter && dir.iter().map(|v| v * v).sum::<f64>().sqrt() >= cfg.tol {
        iterations += 1;
        let v: Vec<f64> = dir.iter().map(|d| step * d).collect();
        let candidate = match exp_endpoint(metric, &mu, &v, solver) {
            Ok(c) => c,
            Err(_) => {
                step *= 0.5;
                continue;
            }
        };
        let new_logs = LogMaps::compute(metric, &candidate, data, Some(&logs), solver);
        match variance_and_direction(metric, &new_logs) {
            Ok((new_var, new_dir)) if new_var <= var => {
                mu = candidate;
                logs = new_logs;
                var = new_var;
                dir = new_dir;
            }
            _ => step *= 0.5,
        }
        if step < 1e-8 {
            break;
        }
    }
    let covariance = if logs.succeeded().count() >= 2 {
        covariance_from_logs(&logs)?
    } else {
        DMatrix::zeros(mu.len(), mu.len())
    };
    Ok(IntrinsicEstimate { mean: mu, covariance, iterations })
}

pub(crate) fn covariance_from_logs(logs: &LogMaps) -> Result<DMatrix<f64>> {
    let d = logs.base.len();
    let n = logs.succeeded().count();
    if n < 2 {
        return Err(LandError::invalid("need at least two points for a covariance"));
    }
    let mut s = DMatrix::zeros(d, d);
    for (_, l) in logs.succeeded() {
        linalg::outer_add(&mut s, l, 1.0 / (n - 1) as f64);
    }
    Ok(s)
}

/// Empirical tangent covariance 1/(N-1) sum_n Log_mu(x_n) Log_mu(x_n)^T.
pub fn intrinsic_covariance(
    data: &DataMatrix,
    metric: &dyn Metric,
    mean: &[f64],
    solver: &GeodesicSolverConfig,
) -> Result<DMatrix<f64>> {
    let logs = LogMaps::compute(metric, mean, data, None, solver);
    logs.check()?;
    covariance_from_logs(&logs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub mean: IntrinsicMeanConfig,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { restarts: 5, max_iter: 100, seed: 0, mean: IntrinsicMeanConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared geodesic distances to the assigned centers.
    pub inertia: f64,
}

/// K distinct data indices drawn uniformly for restart `restart`.
pub fn forgy_indices(n: usize, k: usize, seed: u64, restart: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, &[purpose::KMEANS, restart as u64]);
    sample_indices(&mut r, n, k).into_vec()
}

/// Squared geodesic distances from every point to `center`; the log map
/// tangent has constant speed, so the length is its norm at the center.
fn squared_distances(metric: &dyn Metric, center: &[f64], data: &DataMatrix, solver: &GeodesicSolverConfig) -> Vec<f64> {
    let logs = LogMaps::compute(metric, center, data, None, solver);
    logs.tangents
        .iter()
        .map(|t| match t {
            Some(v) => metric.squared_norm(center, v).unwrap_or(f64::INFINITY),
            None => f64::INFINITY,
        })
        .collect()
}

/// Lloyd iterations with geodesic-distance assignment and intrinsic-mean
/// center updates; the best of `restarts` Forgy initializations is kept.
pub fn riemannian_kmeans(data: &DataMatrix, metric: &dyn Metric, k: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = data.n_rows();
    if k == 0 || k > n {
        return Err(LandError::invalid(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    if data.dim() != metric.dim() {
        return Err(LandError::DimensionMismatch { expected: metric.dim(), got: data.dim() });
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut centers: Vec<Vec<f64>> =
            forgy_indices(n, k, cfg.seed, restart).into_iter().map(|i| data.row(i).to_vec()).collect();
        let mut assignments = vec![usize::MAX; n];
        let mut inertia = f64::INFINITY;
        for _ in 0..cfg.max_iter {
            let dist: Vec<Vec<f64>> =
                centers.iter().map(|c| squared_distances(metric, c, data, &cfg.mean.solver)).collect();
            let mut changed = false;
            inertia = 0.0;
            for i in 0..n {
                let mut j_best = 0;
                for j in 1..k {
                    if dist[j][i] < dist[j_best][i] {
                        j_best = j;
                    }
                }
                inertia += dist[j_best][i];
                if assignments[i] != j_best {
                    assignments[i] = j_best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (j, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == j).collect();
                if members.is_empty() {
                    continue;
                }
                let subset = data.select(&members)?;
                *center = cluster_mean(&subset, metric, center, &cfg.mean)?;
            }
        }
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult { centers, assignments, inertia });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn cluster_mean(subset: &DataMatrix, metric: &dyn Metric, start: &[f64], cfg: &IntrinsicMeanConfig) -> Result<Vec<f64>> {
    if subset.n_rows() == 1 {
        return Ok(subset.row(0).to_vec());
    }
    Ok(intrinsic_mean_from(subset, metric, start, cfg)?.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop when the mean log-likelihood changes by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-9, seed: 0 }
    }
}

/// Euclidean Gaussian mixture with full covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major D x D covariances.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

struct GmmCache {
    chol_inv: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl GaussianMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    fn cache(&self) -> Result<GmmCache> {
        let d = self.dim() as f64;
        let mut chol_inv = Vec::with_capacity(self.k());
        let mut log_norm = Vec::with_capacity(self.k());
        for (w, c) in self.weights.iter().zip(&self.covariances) {
            let sigma = linalg::from_rows(c)?;
            let l = linalg::cholesky_lower(&sigma)?;
            let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            chol_inv.push(l.try_inverse().ok_or(LandError::NotPositiveDefinite)?);
            log_norm.push(w.ln() - 0.5 * (d * (2.0 * PI).ln() + log_det));
        }
        Ok(GmmCache { chol_inv, log_norm })
    }

    /// ln(pi_k N(x; m_k, S_k)) for every component.
    fn component_log_terms(&self, cache: &GmmCache, x: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let diff: Vec<f64> = x.iter().zip(&self.means[k]).map(|(a, b)| a - b).collect();
                let z = linalg::mat_vec(&cache.chol_inv[k], &diff);
                cache.log_norm[k] - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
            })
            .collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let cache = self.cache()?;
        Ok(log_sum_exp(&self.component_log_terms(&cache, x)))
    }

    /// Per-point log densities.
    pub fn log_pdfs(&self, data: &DataMatrix) -> Result<Vec<f64>> {
        let cache = self.cache()?;
        Ok(data.rows().map(|x| log_sum_exp(&self.component_log_terms(&cache, x))).collect())
    }

    pub fn log_likelihood(&self, data: &DataMatrix) -> Result<f64> {
        Ok(self.log_pdfs(data)?.iter().sum())
    }

    /// Posterior component probabilities, one row per point.
    pub fn responsibilities(&self, data: &DataMatrix) -> Result<Vec<Vec<f64>>> {
        let cache = self.cache()?;
        Ok(data
            .rows()
            .map(|x| {
                let t = self.component_log_terms(&cache, x);
                let lse = log_sum_exp(&t);
                t.iter().map(|v| (v - lse).exp()).collect()
            })
            .collect())
    }

    /// Most responsible component per point (ties to the lowest index).
    pub fn assignments(&self, data: &DataMatrix) -> Result<Vec<usize>> {
        Ok(self.responsibilities(data)?.iter().map(|r| argmax(r)).collect())
    }

    pub fn sample(&self, n: usize, seed: u64, counters: &[u64]) -> Result<DataMatrix> {
        let d = self.dim();
        let mut key = vec![purpose::SAMPLING];
        key.extend_from_slice(counters);
        let mut r = rng::stream(seed, &key);
        let chols = self
            .covariances
            .iter()
            .map(|c| linalg::cholesky_lower(&linalg::from_rows(c)?))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut k = self.k() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let z: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let x = linalg::mat_vec(&chols[k], &z);
            out.extend(x.iter().zip(&self.means[k]).map(|(a, b)| a + b));
        }
        DataMatrix::new(n, d, out)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Euclidean Lloyd iterations from `centers`; returns the final labels.
fn lloyd(data: &DataMatrix, mut centers: Vec<Vec<f64>>) -> Vec<usize> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut labels = vec![usize::MAX; data.n_rows()];
    for _ in 0..100 {
        let next: Vec<usize> =
            data.rows().map(|x| (0..centers.len()).min_by(|&a, &b| sq(x, &centers[a]).total_cmp(&sq(x, &centers[b]))).unwrap()).collect();
        if next == labels {
            break;
        }
        labels = next;
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64]> = data.rows().zip(&labels).filter(|(_, &l)| l == j).map(|(x, _)| x).collect();
            if !members.is_empty() {
                for (d, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|x| x[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    labels
}

/// k-means++ seeding by squared Euclidean distance.
fn kmeans_pp(data: &DataMatrix, k: usize, seed: u64) -> Vec<usize> {
    let n = data.n_rows();
    let mut r = rng::stream(seed, &[purpose::GMM]);
    let mut chosen = vec![r.random_range(0..n)];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut d2: Vec<f64> = data.rows().map(|x| sq(x, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = r.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, x) in data.rows().enumerate() {
            d2[i] = d2[i].min(sq(x, data.row(next)));
        }
    }
    chosen
}

/// Clamps eigenvalues from below.
fn floor_covariance(s: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = linalg::symmetrize(s).symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return linalg::symmetrize(s);
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    linalg::symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// Weighted mean and ML covariance, floored.
fn weighted_moments(data: &DataMatrix, w: &[f64], floor: f64) -> (Vec<f64>, DMatrix<f64>) {
    let d = data.dim();
    let total: f64 = w.iter().sum();
    let mut mean = vec![0.0; d];
    for (x, wi) in data.rows().zip(w) {
        for (m, xi) in mean.iter_mut().zip(x) {
            *m += wi * xi / total;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, wi) in data.rows().zip(w) {
        let diff: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        linalg::outer_add(&mut cov, &diff, wi / total);
    }
    (mean, floor_covariance(&cov, floor))
}

/// Standard EM for a Euclidean Gaussian mixture with k-means++ seeding.
/// Covariance eigenvalues are floored at 1e-6 tr(S)/D of the data covariance.
pub fn gmm_fit(data: &DataMatrix, k: usize, cfg: &GmmConfig) -> Result<GaussianMixture> {
    let n = data.n_rows();
    let d = data.dim();
    if k == 0 || k > n {
        return Err(LandError::invalid(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    let (_, global) = weighted_moments(data, &vec![1.0; n], 0.0);
    let floor = (1e-6 * global.trace() / d as f64).max(1e-12);
    let global = floor_covariance(&global, floor);
    let to_rows = |m: &DMatrix<f64>| linalg::rows_of(m);

    // Start from the moments of a Euclidean k-means partition; a shared
    // global covariance lets one badly scaled axis decide the first E-step.
    let labels = lloyd(data, kmeans_pp(data, k, cfg.seed).into_iter().map(|i| data.row(i).to_vec()).collect());
    let mut model = GaussianMixture { weights: Vec::new(), means: Vec::new(), covariances: Vec::new() };
    for j in 0..k {
        let w: Vec<f64> = labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
        let count: f64 = w.iter().sum();
        let (mean, cov) = if count >= 2.0 { weighted_moments(data, &w, floor) } else { (data.mean(), global.clone()) };
        model.weights.push(count.max(1.0));
        model.means.push(mean);
        model.covariances.push(to_rows(&cov));
    }
    let wsum: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= wsum);
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter {
        let resp = model.responsibilities(data)?;
        let mut next = GaussianMixture { weights: Vec::new(), means: Vec::new(), covariances: Vec::new() };
        for j in 0..k {
            let w: Vec<f64> = resp.iter().map(|r| r[j]).collect();
            let total: f64 = w.iter().sum();
            if total < 1e-10 {
                warn!("Gaussian mixture component {j} is empty; keeping its previous parameters");
                next.weights.push(total.max(1e-300));
                next.means.push(model.means[j].clone());
                next.covariances.push(model.covariances[j].clone());
                continue;
            }
            let (mean, cov) = weighted_moments(data, &w, floor);
            next.weights.push(total / n as f64);
            next.means.push(mean);
            next.covariances.push(to_rows(&cov));
        }
        let wsum: f64 = next.weights.iter().sum();
        next.weights.iter_mut().for_each(|w| *w /= wsum);
        model = next;
        let ll = model.log_likelihood(data)? / n as f64;
        if (ll - prev).abs() < cfg.tol {
            break;
        }
        prev = ll;
    }
    Ok(model)
}
