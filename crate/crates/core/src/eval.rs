//! Synthetic data generators and evaluation metrics.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, LabeledDataset};
use crate::error::{LandError, Result};
use crate::rng;

/// Number of Gaussian components along the half-ellipse.
pub const HALF_ELLIPSE_COMPONENTS: usize = 20;
pub const HALF_ELLIPSE_A: f64 = 1.0;
pub const HALF_ELLIPSE_B: f64 = 0.5;
pub const DEFAULT_NOISE: f64 = 0.05;

/// Equal-weight mixture of isotropic Gaussians; the ground truth of the
/// synthetic experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicMixture {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl IsotropicMixture {
    /// The half-ellipse ground truth with the given per-component std.
    pub fn half_ellipse(std: f64) -> Self {
        let k = HALF_ELLIPSE_COMPONENTS;
        let means = (0..k)
            .map(|i| {
                let th = PI * i as f64 / (k - 1) as f64;
                vec![HALF_ELLIPSE_A * th.cos(), HALF_ELLIPSE_B * th.sin()]
            })
            .collect();
        Self { means, std }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let var = self.std * self.std;
        let log_norm = -0.5 * d * (2.0 * PI * var).ln() - (self.means.len() as f64).ln();
        let terms: Vec<f64> = self
            .means
            .iter()
            .map(|m| {
                let sq: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                log_norm - 0.5 * sq / var
            })
            .collect();
        log_sum_exp(&terms)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

/// Arc length of the generating half-ellipse (numerical quadrature).
pub fn half_ellipse_arc_length() -> f64 {
    let n = 20_000;
    let h = PI / n as f64;
    let speed = |t: f64| ((HALF_ELLIPSE_A * t.sin()).powi(2) + (HALF_ELLIPSE_B * t.cos()).powi(2)).sqrt();
    // composite Simpson
    let mut s = speed(0.0) + speed(PI);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * speed(i as f64 * h);
    }
    s * h / 3.0
}

/// Points from 20 isotropic Gaussians whose means are evenly spaced in angle
/// along the upper half of an ellipse with semi-axes (1, 0.5). Point `i`
/// belongs to component `i mod 20`; labels are component indices.
pub fn gen_half_ellipsoid(n: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || !(noise >= 0.0) {
        return Err(LandError::invalid("need n >= 1 and noise >= 0"));
    }
    let truth = IsotropicMixture::half_ellipse(noise);
    let mut r = rng::stream(seed, &[0x4845]);
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % HALF_ELLIPSE_COMPONENTS;
        for d in 0..2 {
            let z: f64 = r.sample(StandardNormal);
            values.push(truth.means[c][d] + noise * z);
        }
        labels.push(c as i64);
    }
    LabeledDataset::new(DataMatrix::new(n, 2, values)?, Some(labels))
}

/// The classic interleaved two half-circles. Label 0 is the upper moon.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 || !(noise >= 0.0) {
        return Err(LandError::invalid("need n >= 2 and noise >= 0"));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut r = rng::stream(seed, &[0x4d4f]);
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let lin = |i: usize, m: usize| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 };
    for i in 0..n_outer {
        let t = lin(i, n_outer);
        values.push(t.cos());
        values.push(t.sin());
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = lin(i, n_inner);
        values.push(1.0 - t.cos());
        values.push(0.5 - t.sin());
        labels.push(1);
    }
    for v in values.iter_mut() {
        let z: f64 = r.sample(StandardNormal);
        *v += noise * z;
    }
    LabeledDataset::new(DataMatrix::new(n, 2, values)?, Some(labels))
}

/// -(1/n) sum_i ln q(x_i): how well samples from a fitted model cover the
/// true density q.
pub fn mean_nll_under_truth(samples: &DataMatrix, truth: &IsotropicMixture) -> f64 {
    -samples.rows().map(|x| truth.log_pdf(x)).sum::<f64>() / samples.n_rows() as f64
}

/// Number of free parameters of a K-component model with full covariances
/// in D dimensions: K (D + D(D+1)/2) + K - 1.
pub fn num_params(k: usize, d: usize) -> usize {
    k * (d + d * (d + 1) / 2) + k - 1
}

/// (AIC, BIC) from a log-likelihood: AIC = -2L + 2 nu, BIC = -2L + nu ln N.
pub fn aic_bic(log_likelihood: f64, nu: usize, n: usize) -> (f64, f64) {
    let nu = nu as f64;
    (-2.0 * log_likelihood + 2.0 * nu, -2.0 * log_likelihood + nu * (n as f64).ln())
}

/// Clustering F-measure: every true class is matched to the cluster with the
/// highest F1 against it, and the per-class scores are averaged with class
/// size weights.
pub fn f_measure(labels: &[i64], clusters: &[usize]) -> Result<f64> {
    if labels.len() != clusters.len() || labels.is_empty() {
        return Err(LandError::invalid("labels and clusters must be non-empty and of equal length"));
    }
    let n = labels.len() as f64;
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut total = 0.0;
    for c in &classes {
        let class_size = labels.iter().filter(|l| *l == c).count() as f64;
        let mut best: f64 = 0.0;
        for k in &ids {
            let cluster_size = clusters.iter().filter(|x| *x == k).count() as f64;
            let both = labels.iter().zip(clusters).filter(|(l, x)| *l == c && *x == k).count() as f64;
            if both > 0.0 {
                let precision = both / cluster_size;
                let recall = both / class_size;
                best = best.max(2.0 * precision * recall / (precision + recall));
            }
        }
        total += class_size / n * best;
    }
    Ok(total)
}

/// One evaluation result as written by the command-line tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub metric_name: String,
    pub value: f64,
}
