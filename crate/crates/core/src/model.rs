//! JSON documents for fitted models.
//!
//! A LAND is stored together with the metric it was fitted on: the kernel
//! width and ridge of the learned metric and a hash of the anchor data file.
//! All three are `null` for a Euclidean (identity) metric.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LandError, Result};
use crate::land::{LandParams, NormConst};
use crate::mixture::LandMixture;

/// The metric a model was fitted on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricInfo {
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    pub anchor_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandDocument {
    pub mu: Vec<f64>,
    /// Row-major factor with Sigma^-1 = A^T A.
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    pub norm_const: Option<f64>,
    #[serde(rename = "S")]
    pub samples: Option<usize>,
    pub seed: u64,
    pub metric_anchor_file_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDocument {
    #[serde(rename = "K")]
    pub k: usize,
    pub weights: Vec<f64>,
    pub components: Vec<LandDocument>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(LandError::invalid(format!("expected a {d}x{d} matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl LandDocument {
    pub fn new(params: &LandParams, metric: &MetricInfo, seed: u64) -> Self {
        let nc = params.norm_const();
        Self {
            mu: params.mu().to_vec(),
            a: rows(params.a()),
            covariance: rows(params.sigma()),
            sigma: metric.sigma,
            rho: metric.rho,
            norm_const: nc.map(|c| c.value),
            samples: nc.map(|c| c.samples),
            seed,
            metric_anchor_file_hash: metric.anchor_hash.clone(),
        }
    }

    /// Parameters rebuilt from the stored factor; the stored covariance is
    /// informational.
    pub fn params(&self) -> Result<LandParams> {
        let a = matrix(&self.a, self.mu.len())?;
        let p = LandParams::from_factor(self.mu.clone(), a)?;
        Ok(match (self.norm_const, self.samples) {
            (Some(value), Some(samples)) => p.with_norm_const(NormConst { value, samples }),
            _ => p,
        })
    }

    pub fn metric(&self) -> MetricInfo {
        MetricInfo { sigma: self.sigma, rho: self.rho, anchor_hash: self.metric_anchor_file_hash.clone() }
    }
}

impl MixtureDocument {
    pub fn new(mix: &LandMixture, metric: &MetricInfo, seed: u64) -> Self {
        Self {
            k: mix.k(),
            weights: mix.weights().to_vec(),
            components: mix.components().iter().map(|c| LandDocument::new(c, metric, seed)).collect(),
        }
    }

    pub fn mixture(&self) -> Result<LandMixture> {
        if self.k != self.components.len() {
            return Err(LandError::invalid(format!("K = {} but {} components", self.k, self.components.len())));
        }
        let comps = self.components.iter().map(LandDocument::params).collect::<Result<Vec<_>>>()?;
        LandMixture::new(self.weights.clone(), comps)
    }

    /// Metric of the first component; all components share it.
    pub fn metric(&self) -> MetricInfo {
        self.components.first().map(LandDocument::metric).unwrap_or_default()
    }
}
