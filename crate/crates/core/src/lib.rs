//! Locally adaptive normal distributions (LANDs) on a learned Riemannian
//! metric: geodesic exponential and logarithm maps, Monte Carlo
//! normalization, maximum-likelihood and mixture fitting, least-squares and
//! Euclidean baselines, and evaluation helpers.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
mod fastexp;
pub mod geodesic;
pub mod land;
pub mod linalg;
pub mod metric;
pub mod mixture;
pub mod model;
pub mod ode;
pub mod rng;

pub use baselines::{gmm_fit, intrinsic_mean, riemannian_kmeans, GaussianMixture, GmmConfig, KMeansConfig};
pub use data::{DataMatrix, LabeledDataset};
pub use error::{LandError, Result};
pub use geodesic::{exp_map, geodesic_distance, log_map, GeodesicCurve, GeodesicSolverConfig};
pub use land::{fit_mle, FitConfig, InitStrategy, LandFit, LandParams, NormConst, SamplingConfig};
pub use metric::{learn_metric, ConstantMetric, LearnedMetric, Metric, MetricParams};
pub use mixture::{em_fit, LandMixture, MixtureFit, Responsibilities};
pub use model::{LandDocument, MetricInfo, MixtureDocument};
