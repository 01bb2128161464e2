//! Data-driven diagonal Riemannian metrics.
//!
//! The learned metric at `x` is the inverse of a kernel-weighted local
//! diagonal covariance of the anchor points:
//!
//! ```text
//! S_d(x)  = sum_n w_n(x) (x_nd - x_d)^2 + rho
//! w_n(x)  = exp(-|x_n - x|^2 / (2 sigma^2))
//! M_dd(x) = 1 / S_d(x)
//! ```
//!
//! The metric is not invariant to linear transformations of the data, so
//! inputs should be on comparable scales across dimensions.

use crate::data::DataMatrix;
use crate::error::{LandError, Result};
use crate::fastexp::exp_neg;

/// A diagonal Riemannian metric on R^D.
///
/// The slice methods are the hot path used by the geodesic integrator and do
/// not check dimensions.
pub trait Metric: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes the diagonal of M(x) into `diag`.
    fn diagonal_into(&self, x: &[f64], diag: &mut [f64]);

    /// Writes the diagonal of M(x) and the row-major D x D matrix
    /// `jac[d * D + k] = dM_dd / dx_k`.
    fn diagonal_and_jacobian_into(&self, x: &[f64], diag: &mut [f64], jac: &mut [f64]);

    fn metric_tensor(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x)?;
        let mut out = vec![0.0; self.dim()];
        self.diagonal_into(x, &mut out);
        Ok(out)
    }

    fn metric_derivative(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x)?;
        let d = self.dim();
        let mut diag = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        self.diagonal_and_jacobian_into(x, &mut diag, &mut jac);
        Ok(jac)
    }

    /// sqrt(|M(x)|), the volume element of the metric.
    fn measure_density(&self, x: &[f64]) -> Result<f64> {
        let diag = self.metric_tensor(x)?;
        Ok(diag.iter().product::<f64>().sqrt())
    }

    /// Squared norm v^T M(x) v.
    fn squared_norm(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        check_dim(self.dim(), v)?;
        let diag = self.metric_tensor(x)?;
        Ok(diag.iter().zip(v).map(|(m, vi)| m * vi * vi).sum())
    }
}

pub(crate) fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(LandError::DimensionMismatch { expected, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LandError::invalid("point contains non-finite entries"));
    }
    Ok(())
}

/// Kernel bandwidth and regularization of the learned metric.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricParams {
    pub sigma: f64,
    pub rho: f64,
}

impl MetricParams {
    pub fn new(sigma: f64, rho: f64) -> Result<Self> {
        let p = Self { sigma, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LandError::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(LandError::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// Suggested regularization: 1e-2 times the squared median pairwise
    /// distance of the data. This is a convention, not a tuned value.
    pub fn suggested_rho(data: &DataMatrix) -> f64 {
        let med = data.median_pairwise_distance();
        let rho = 1e-2 * med * med;
        if rho > 0.0 {
            rho
        } else {
            1e-2
        }
    }
}

/// The learned metric. Immutable after construction.
#[derive(Debug, Clone)]
pub struct LearnedMetric {
    anchors: DataMatrix,
    params: MetricParams,
    inv_two_sigma_sq: f64,
    inv_sigma_sq: f64,
    // Column copies for the two-dimensional fast path.
    cols2: Option<(Vec<f64>, Vec<f64>)>,
}

/// Builds the learned metric from anchor data.
pub fn learn_metric(data: DataMatrix, params: MetricParams) -> Result<LearnedMetric> {
    LearnedMetric::new(data, params)
}

impl LearnedMetric {
    pub fn new(anchors: DataMatrix, params: MetricParams) -> Result<Self> {
        params.validate()?;
        let s2 = params.sigma * params.sigma;
        let cols2 = (anchors.dim() == 2).then(|| {
            (anchors.rows().map(|r| r[0]).collect(), anchors.rows().map(|r| r[1]).collect())
        });
        Ok(Self { anchors, params, inv_two_sigma_sq: 0.5 / s2, inv_sigma_sq: 1.0 / s2, cols2 })
    }

    pub fn anchors(&self) -> &DataMatrix {
        &self.anchors
    }

    pub fn params(&self) -> MetricParams {
        self.params
    }

    // Accumulates S_d(x) into `s` (without rho).
    fn moments_2d(&self, c0: &[f64], c1: &[f64], x0: f64, x1: f64) -> [f64; 8] {
        let scale = self.inv_two_sigma_sq;
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { moments_2d_avx512(c0, c1, x0, x1, scale) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { moments_2d_avx2(c0, c1, x0, x1, scale) };
            }
        }
        moments_2d_body(c0, c1, x0, x1, scale)
    }

    fn kernel_sums(&self, x: &[f64], s: &mut [f64]) {
        s.iter_mut().for_each(|v| *v = 0.0);
        let dim = x.len();
        if let Some((c0, c1)) = &self.cols2 {
            let m = self.moments_2d(c0, c1, x[0], x[1]);
            s[0] = m[0];
            s[1] = m[1];
            return;
        }
        let mut diff = vec![0.0; dim];
        for a in self.anchors.rows() {
            let mut sq = 0.0;
            for d in 0..dim {
                diff[d] = a[d] - x[d];
                sq += diff[d] * diff[d];
            }
            let w = exp_neg(-sq * self.inv_two_sigma_sq);
            for d in 0..dim {
                s[d] += w * diff[d] * diff[d];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn moments_2d_avx512(c0: &[f64], c1: &[f64], x0: f64, x1: f64, scale: f64) -> [f64; 8] {
    moments_2d_body(c0, c1, x0, x1, scale)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn moments_2d_avx2(c0: &[f64], c1: &[f64], x0: f64, x1: f64, scale: f64) -> [f64; 8] {
    moments_2d_body(c0, c1, x0, x1, scale)
}

/// Kernel moments in two dimensions: S_0, S_1 (without rho), then
/// G_dk = sum w t_d diff_k in row-major order, then H_d = sum w diff_d.
///
/// Anchors are accumulated in eight independent lanes that are combined in a
/// fixed order, so the result is the same whatever SIMD width executes it.
#[inline(always)]
fn moments_2d_body(c0: &[f64], c1: &[f64], x0: f64, x1: f64, scale: f64) -> [f64; 8] {
    const LANES: usize = 8;
    let mut acc = [[0.0f64; LANES]; 8];
    let blocks = c0.len() / LANES;
    for b in 0..blocks {
        let a0 = &c0[b * LANES..(b + 1) * LANES];
        let a1 = &c1[b * LANES..(b + 1) * LANES];
        for l in 0..LANES {
            let d0 = a0[l] - x0;
            let d1 = a1[l] - x1;
            let t0 = d0 * d0;
            let t1 = d1 * d1;
            let w = exp_neg(-(t0 + t1) * scale);
            let wt0 = w * t0;
            let wt1 = w * t1;
            acc[0][l] += wt0;
            acc[1][l] += wt1;
            acc[2][l] += wt0 * d0;
            acc[3][l] += wt0 * d1;
            acc[4][l] += wt1 * d0;
            acc[5][l] += wt1 * d1;
            acc[6][l] += w * d0;
            acc[7][l] += w * d1;
        }
    }
    for i in blocks * LANES..c0.len() {
        let d0 = c0[i] - x0;
        let d1 = c1[i] - x1;
        let t0 = d0 * d0;
        let t1 = d1 * d1;
        let w = exp_neg(-(t0 + t1) * scale);
        acc[0][0] += w * t0;
        acc[1][0] += w * t1;
        acc[2][0] += w * t0 * d0;
        acc[3][0] += w * t0 * d1;
        acc[4][0] += w * t1 * d0;
        acc[5][0] += w * t1 * d1;
        acc[6][0] += w * d0;
        acc[7][0] += w * d1;
    }
    let mut out = [0.0; 8];
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
    }
    out
}

impl Metric for LearnedMetric {
    fn dim(&self) -> usize {
        self.anchors.dim()
    }

    fn diagonal_into(&self, x: &[f64], diag: &mut [f64]) {
        self.kernel_sums(x, diag);
        for v in diag.iter_mut() {
            *v = 1.0 / (*v + self.params.rho);
        }
    }

    fn diagonal_and_jacobian_into(&self, x: &[f64], diag: &mut [f64], jac: &mut [f64]) {
        // dS_d/dx_k = sum_n w_n [ (x_nk - x_k) (x_nd - x_d)^2 / sigma^2 - 2 (x_nd - x_d) [d = k] ]
        let dim = x.len();
        let rho = self.params.rho;
        if let Some((c0, c1)) = &self.cols2 {
            let [s0, s1, g00, g01, g10, g11, h0, h1] = self.moments_2d(c0, c1, x[0], x[1]);
            let inv_s2 = self.inv_sigma_sq;
            let m0 = 1.0 / (s0 + rho);
            let m1 = 1.0 / (s1 + rho);
            diag[0] = m0;
            diag[1] = m1;
            jac[0] = -m0 * m0 * (g00 * inv_s2 - 2.0 * h0);
            jac[1] = -m0 * m0 * (g01 * inv_s2);
            jac[2] = -m1 * m1 * (g10 * inv_s2);
            jac[3] = -m1 * m1 * (g11 * inv_s2 - 2.0 * h1);
            return;
        }

        let mut diff = vec![0.0; dim];
        let mut h = vec![0.0; dim];
        diag.iter_mut().for_each(|v| *v = 0.0);
        jac.iter_mut().for_each(|v| *v = 0.0);
        for a in self.anchors.rows() {
            let mut sq = 0.0;
            for d in 0..dim {
                diff[d] = a[d] - x[d];
                sq += diff[d] * diff[d];
            }
            let w = exp_neg(-sq * self.inv_two_sigma_sq);
            for d in 0..dim {
                let wt = w * diff[d] * diff[d];
                diag[d] += wt;
                h[d] += w * diff[d];
                let row = &mut jac[d * dim..(d + 1) * dim];
                for k in 0..dim {
                    row[k] += wt * diff[k];
                }
            }
        }
        for d in 0..dim {
            let m = 1.0 / (diag[d] + rho);
            diag[d] = m;
            let row = &mut jac[d * dim..(d + 1) * dim];
            for k in 0..dim {
                let mut ds = row[k] * self.inv_sigma_sq;
                if k == d {
                    ds -= 2.0 * h[d];
                }
                row[k] = -m * m * ds;
            }
        }
    }
}

/// A position-independent diagonal metric; the identity metric is the
/// Euclidean special case.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantMetric {
    diag: Vec<f64>,
}

impl ConstantMetric {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || diag.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(LandError::invalid("constant metric needs positive finite entries"));
        }
        Ok(Self { diag })
    }

    pub fn identity(dim: usize) -> Self {
        Self { diag: vec![1.0; dim] }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }
}

impl Metric for ConstantMetric {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn diagonal_into(&self, _x: &[f64], diag: &mut [f64]) {
        diag.copy_from_slice(&self.diag);
    }

    fn diagonal_and_jacobian_into(&self, _x: &[f64], diag: &mut [f64], jac: &mut [f64]) {
        diag.copy_from_slice(&self.diag);
        jac.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_anchor() -> LearnedMetric {
        let data = DataMatrix::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        learn_metric(data, MetricParams::new(1.0, 0.1).unwrap()).unwrap()
    }

    #[test]
    fn single_anchor_gives_inverse_rho() {
        let data = DataMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let m = learn_metric(data, MetricParams::new(1.0, 0.1).unwrap()).unwrap();
        let diag = m.metric_tensor(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(diag[0], 10.0, epsilon = 1e-12);
        assert_relative_eq!(diag[1], 10.0, epsilon = 1e-12);
        assert_relative_eq!(m.measure_density(&[0.0, 0.0]).unwrap(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn two_anchor_values() {
        // Direct kernel sum: w = exp(-1/2), S_1 = 2 w + 0.1, S_2 = 0.1.
        let w = (-0.5f64).exp();
        let m11 = 1.0 / (2.0 * w + 0.1);
        let m = two_anchor();
        let diag = m.metric_tensor(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(diag[0], m11, epsilon = 1e-14);
        assert_relative_eq!(diag[0], 0.7616, epsilon = 1e-4);
        assert_relative_eq!(diag[1], 10.0, epsilon = 1e-12);
        assert_relative_eq!(m.measure_density(&[0.0, 0.0]).unwrap(), 2.7597, epsilon = 1e-4);
    }

    #[test]
    fn far_field_tends_to_inverse_rho() {
        let m = two_anchor();
        let diag = m.metric_tensor(&[100.0, -80.0]).unwrap();
        assert_relative_eq!(diag[0], 10.0, epsilon = 1e-12);
        assert_relative_eq!(diag[1], 10.0, epsilon = 1e-12);
        let jac = m.metric_derivative(&[100.0, -80.0]).unwrap();
        assert!(jac.iter().all(|v| v.abs() < 1e-12));
        assert_relative_eq!(m.measure_density(&[100.0, -80.0]).unwrap(), 0.1f64.powf(-1.0), epsilon = 1e-10);
    }

    #[test]
    fn derivative_vanishes_along_symmetry_axis() {
        // Data symmetric under x -> -x; at x = 0 every M_dd is even in x_1.
        let jac = two_anchor().metric_derivative(&[0.0, 0.0]).unwrap();
        assert!(jac[0].abs() < 1e-14);
        assert!(jac[2].abs() < 1e-14);
    }

    #[test]
    fn derivative_matches_central_differences_two_anchor() {
        let m = two_anchor();
        let x = [0.0, 0.0];
        let jac = m.metric_derivative(&x).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let mp = m.metric_tensor(&xp).unwrap();
            let mm = m.metric_tensor(&xm).unwrap();
            for d in 0..2 {
                let fd = (mp[d] - mm[d]) / (2.0 * h);
                let an = jac[d * 2 + k];
                let err = (fd - an).abs() / an.abs().max(1e-8);
                assert!(err <= 1e-6 || (fd - an).abs() < 1e-10, "d={d} k={k} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn general_path_agrees_with_two_dimensional_path() {
        // Embed the 2-D data into 3-D with a constant third coordinate; the
        // first two diagonal entries must agree with the specialised path.
        let m2 = LearnedMetric::new(
            DataMatrix::from_rows(&[[0.3, -0.2], [1.0, 0.5], [-0.7, 0.1]]).unwrap(),
            MetricParams::new(0.8, 0.05).unwrap(),
        )
        .unwrap();
        let m3 = LearnedMetric::new(
            DataMatrix::from_rows(&[[0.3, -0.2, 0.0], [1.0, 0.5, 0.0], [-0.7, 0.1, 0.0]]).unwrap(),
            MetricParams::new(0.8, 0.05).unwrap(),
        )
        .unwrap();
        let j2 = m2.metric_derivative(&[0.1, 0.2]).unwrap();
        let j3 = m3.metric_derivative(&[0.1, 0.2, 0.0]).unwrap();
        let d2 = m2.metric_tensor(&[0.1, 0.2]).unwrap();
        let d3 = m3.metric_tensor(&[0.1, 0.2, 0.0]).unwrap();
        for d in 0..2 {
            assert_relative_eq!(d2[d], d3[d], epsilon = 1e-14);
            for k in 0..2 {
                assert_relative_eq!(j2[d * 2 + k], j3[d * 3 + k], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn rejects_bad_params_and_dims() {
        assert!(MetricParams::new(0.0, 0.1).is_err());
        assert!(MetricParams::new(1.0, -1.0).is_err());
        let m = two_anchor();
        assert!(matches!(
            m.metric_tensor(&[0.0, 0.0, 0.0]),
            Err(LandError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }
}
