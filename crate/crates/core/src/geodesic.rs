//! Geodesics of a diagonal metric: exponential map (initial value problem),
//! logarithm map (boundary value problem by single shooting), curve length
//! and geodesic distance.
//!
//! The geodesic equation for a diagonal metric reads
//!
//! ```text
//! a_d = -1 / (2 M_dd) * [ 2 sum_k dM_dd/dx_k v_d v_k - sum_k dM_kk/dx_d v_k^2 ]
//! ```
//!
//! which is the diagonal specialisation of
//! `-1/2 M^-1 [ 2 (I (x) v^T) dvec[M]/dx v - dvec[M]/dx^T (v (x) v) ]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LandError, Result};
use crate::metric::{check_dim, Metric};
use crate::ode::{self, OdeFailure, Tolerances, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Adaptive Dormand-Prince 5(4).
    DormandPrince,
    /// Classic RK4 with a fixed number of equal steps.
    Rk4 { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// v0 = y - x.
    StraightLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodesicSolverConfig {
    pub ivp_rel_tol: f64,
    pub ivp_abs_tol: f64,
    pub max_steps: usize,
    pub bvp_max_iter: usize,
    /// Endpoint residual threshold, in data units.
    pub bvp_tol: f64,
    pub initial_guess: InitialGuess,
    pub integrator: Integrator,
}

impl Default for GeodesicSolverConfig {
    fn default() -> Self {
        Self {
            ivp_rel_tol: 1e-6,
            ivp_abs_tol: 1e-8,
            max_steps: 2000,
            bvp_max_iter: 30,
            bvp_tol: 1e-5,
            initial_guess: InitialGuess::StraightLine,
            integrator: Integrator::DormandPrince,
        }
    }
}

impl GeodesicSolverConfig {
    /// Looser integration for exponential maps whose endpoints only feed
    /// Monte Carlo averages (normalization constants, sampling).
    pub fn sampling() -> Self {
        Self { ivp_rel_tol: 1e-4, ivp_abs_tol: 1e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ivp_rel_tol > 0.0 && self.ivp_abs_tol > 0.0 && self.bvp_tol > 0.0) {
            return Err(LandError::invalid("solver tolerances must be positive"));
        }
        if self.max_steps == 0 || self.bvp_max_iter == 0 {
            return Err(LandError::invalid("solver iteration limits must be at least 1"));
        }
        if let Integrator::Rk4 { steps } = self.integrator {
            if steps == 0 {
                return Err(LandError::invalid("RK4 needs at least one step"));
            }
        }
        Ok(())
    }

    fn tolerances(&self) -> Tolerances {
        Tolerances { rel: self.ivp_rel_tol, abs: self.ivp_abs_tol, max_steps: self.max_steps }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveNode {
    pub t: f64,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
}

/// A geodesic stored at the integrator's accepted steps. Positions between
/// nodes are reconstructed by cubic Hermite interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicCurve {
    nodes: Vec<CurveNode>,
}

impl GeodesicCurve {
    fn from_trajectory(traj: &Trajectory, dim: usize) -> Self {
        let nodes = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(&t, s)| CurveNode { t, position: s[..dim].to_vec(), velocity: s[dim..].to_vec() })
            .collect();
        Self { nodes }
    }

    pub fn nodes(&self) -> &[CurveNode] {
        &self.nodes
    }

    pub fn start(&self) -> &[f64] {
        &self.nodes[0].position
    }

    pub fn end(&self) -> &[f64] {
        &self.nodes[self.nodes.len() - 1].position
    }

    fn segment(&self, t: f64) -> usize {
        let last = self.nodes.len() - 1;
        if last == 0 {
            return 0;
        }
        let idx = self.nodes.partition_point(|n| n.t <= t);
        idx.clamp(1, last) - 1
    }

    /// Position and velocity at `t` (clamped to the curve's time range).
    pub fn evaluate(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        if self.nodes.len() == 1 {
            let n = &self.nodes[0];
            return (n.position.clone(), n.velocity.clone());
        }
        let i = self.segment(t);
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        let h = b.t - a.t;
        let s = ((t - a.t) / h).clamp(0.0, 1.0);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -6.0 * s2 + 6.0 * s;
        let d11 = 3.0 * s2 - 2.0 * s;
        let dim = a.position.len();
        let mut p = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        for d in 0..dim {
            p[d] = h00 * a.position[d] + h * h10 * a.velocity[d] + h01 * b.position[d] + h * h11 * b.velocity[d];
            v[d] = (d00 * a.position[d] + d01 * b.position[d]) / h + d10 * a.velocity[d] + d11 * b.velocity[d];
        }
        (p, v)
    }

    /// Riemannian length, by 3-point Gauss-Legendre quadrature on each segment.
    pub fn length(&self, metric: &dyn Metric) -> f64 {
        let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let dim = metric.dim();
        let mut diag = vec![0.0; dim];
        let mut total = 0.0;
        for w in self.nodes.windows(2) {
            let (t0, t1) = (w[0].t, w[1].t);
            let half = 0.5 * (t1 - t0);
            let mid = 0.5 * (t1 + t0);
            for (xi, wi) in nodes.iter().zip(&weights) {
                let (p, v) = self.evaluate(mid + half * xi);
                metric.diagonal_into(&p, &mut diag);
                let speed2: f64 = diag.iter().zip(&v).map(|(m, vi)| m * vi * vi).sum();
                total += wi * half * speed2.sqrt();
            }
        }
        total
    }
}

struct RhsBuffers {
    diag: Vec<f64>,
    jac: Vec<f64>,
}

impl RhsBuffers {
    fn new(dim: usize) -> Self {
        Self { diag: vec![0.0; dim], jac: vec![0.0; dim * dim] }
    }
}

#[inline]
fn acceleration_into(metric: &dyn Metric, pos: &[f64], vel: &[f64], buf: &mut RhsBuffers, out: &mut [f64]) {
    let dim = pos.len();
    metric.diagonal_and_jacobian_into(pos, &mut buf.diag, &mut buf.jac);
    let jac = &buf.jac;
    for d in 0..dim {
        let row = &jac[d * dim..(d + 1) * dim];
        let mut first = 0.0;
        let mut second = 0.0;
        for k in 0..dim {
            first += row[k] * vel[k];
            second += jac[k * dim + d] * vel[k] * vel[k];
        }
        out[d] = -0.5 / buf.diag[d] * (2.0 * first * vel[d] - second);
    }
}

/// Geodesic acceleration at `position` with velocity `velocity`.
pub fn geodesic_rhs(metric: &dyn Metric, position: &[f64], velocity: &[f64]) -> Result<Vec<f64>> {
    check_dim(metric.dim(), position)?;
    check_dim(metric.dim(), velocity)?;
    let mut buf = RhsBuffers::new(metric.dim());
    let mut out = vec![0.0; metric.dim()];
    acceleration_into(metric, position, velocity, &mut buf, &mut out);
    Ok(out)
}

fn state_rhs<'a>(metric: &'a dyn Metric) -> impl FnMut(&[f64], &mut [f64]) + 'a {
    let dim = metric.dim();
    let mut buf = RhsBuffers::new(dim);
    move |y: &[f64], dy: &mut [f64]| {
        dy[..dim].copy_from_slice(&y[dim..]);
        let (pos, vel) = y.split_at(dim);
        acceleration_into(metric, pos, vel, &mut buf, &mut dy[dim..]);
    }
}

fn initial_state(x: &[f64], v: &[f64]) -> Vec<f64> {
    let mut y0 = Vec::with_capacity(2 * x.len());
    y0.extend_from_slice(x);
    y0.extend_from_slice(v);
    y0
}

fn integrate(metric: &dyn Metric, x: &[f64], v: &[f64], cfg: &GeodesicSolverConfig) -> Result<Trajectory> {
    let y0 = initial_state(x, v);
    let dim = metric.dim();
    let result = match cfg.integrator {
        Integrator::DormandPrince => ode::integrate_adaptive(state_rhs(metric), &y0, 1.0, &cfg.tolerances()),
        Integrator::Rk4 { steps } => ode::integrate_rk4(state_rhs(metric), &y0, 1.0, steps),
    };
    result.map_err(|f| match f {
        OdeFailure::StepLimit(traj) => LandError::StepLimit {
            steps: cfg.max_steps,
            reached: *traj.times.last().unwrap_or(&0.0),
            partial: Box::new(GeodesicCurve::from_trajectory(&traj, dim)),
        },
        OdeFailure::NonFinite(traj) => LandError::Divergence { t: *traj.times.last().unwrap_or(&0.0) },
    })
}

/// Exponential map: endpoint of the geodesic from `x` with initial velocity
/// `v`, together with the curve.
pub fn exp_map(
    metric: &dyn Metric,
    x: &[f64],
    v: &[f64],
    cfg: &GeodesicSolverConfig,
) -> Result<(Vec<f64>, GeodesicCurve)> {
    check_dim(metric.dim(), x)?;
    check_dim(metric.dim(), v)?;
    let traj = integrate(metric, x, v, cfg)?;
    let curve = GeodesicCurve::from_trajectory(&traj, metric.dim());
    Ok((curve.end().to_vec(), curve))
}

/// Exponential map returning only the endpoint.
pub fn exp_endpoint(metric: &dyn Metric, x: &[f64], v: &[f64], cfg: &GeodesicSolverConfig) -> Result<Vec<f64>> {
    let traj = integrate(metric, x, v, cfg)?;
    let last = traj.states.last().expect("trajectory has at least the initial state");
    Ok(last[..metric.dim()].to_vec())
}

/// Result of a logarithm map solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMapSolution {
    pub tangent: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Latest quasi-Newton estimate of d Exp_x(v) / dv, if one was formed.
    pub jacobian: Option<DMatrix<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

struct Shot {
    residual: Vec<f64>,
    norm: f64,
    /// Accepted step times; absent when the endpoint was supplied.
    mesh: Option<Vec<f64>>,
}

fn shoot(metric: &dyn Metric, x: &[f64], y: &[f64], v: &[f64], cfg: &GeodesicSolverConfig) -> Option<Shot> {
    let traj = integrate(metric, x, v, cfg).ok()?;
    let end = &traj.states.last()?[..x.len()];
    let residual: Vec<f64> = end.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = norm(&residual);
    Some(Shot { residual, norm: n, mesh: Some(traj.times) })
}

fn endpoint_on_mesh(metric: &dyn Metric, x: &[f64], v: &[f64], mesh: &[f64], cfg: &GeodesicSolverConfig) -> Option<Vec<f64>> {
    let y0 = initial_state(x, v);
    let end = match cfg.integrator {
        Integrator::DormandPrince => ode::integrate_on_mesh(state_rhs(metric), &y0, mesh)?,
        Integrator::Rk4 { steps } => {
            ode::integrate_rk4(state_rhs(metric), &y0, 1.0, steps).ok()?.states.pop()?
        }
    };
    Some(end[..x.len()].to_vec())
}

fn fd_jacobian(
    metric: &dyn Metric,
    x: &[f64],
    v: &[f64],
    shot: &Shot,
    y: &[f64],
    cfg: &GeodesicSolverConfig,
) -> Option<DMatrix<f64>> {
    let mesh = shot.mesh.as_deref()?;
    // Replaying the accepted mesh reproduces the base endpoint exactly, so
    // the base is y + residual.
    let dim = x.len();
    let h = 1e-7 * (1.0 + norm(v));
    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let mut vp = v.to_vec();
        vp[j] += h;
        let end = endpoint_on_mesh(metric, x, &vp, mesh, cfg)?;
        for i in 0..dim {
            jac[(i, j)] = (end[i] - (y[i] + shot.residual[i])) / h;
        }
    }
    Some(jac)
}

fn newton_step(jac: &DMatrix<f64>, residual: &[f64]) -> Option<DVector<f64>> {
    let rhs = -DVector::from_column_slice(residual);
    match jac.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|a| a.is_finite()) => Some(s),
        _ => jac.clone().svd(true, true).solve(&rhs, 1e-12).ok().filter(|s| s.iter().all(|a| a.is_finite())),
    }
}

/// Logarithm map by single shooting from an explicit initial velocity.
///
/// Damped quasi-Newton iterations on `Exp_x(v) - y`. The endpoint Jacobian
/// starts from forward differences along the base solution's step mesh and
/// is then updated by Broyden's rank-one rule; it is rebuilt from finite
/// differences whenever the line search stalls.
pub fn log_map_from(
    metric: &dyn Metric,
    x: &[f64],
    y: &[f64],
    guess: &[f64],
    cfg: &GeodesicSolverConfig,
) -> Result<LogMapSolution> {
    log_map_seeded(metric, x, y, ShootingSeed::new(guess), cfg)
}

/// Starting point for a shooting solve: an initial velocity, optionally its
/// already known endpoint and a Jacobian estimate kept from a nearby solve.
#[derive(Debug, Clone, Copy)]
pub struct ShootingSeed<'a> {
    pub tangent: &'a [f64],
    pub endpoint: Option<&'a [f64]>,
    pub jacobian: Option<&'a DMatrix<f64>>,
}

impl<'a> ShootingSeed<'a> {
    pub fn new(tangent: &'a [f64]) -> Self {
        Self { tangent, endpoint: None, jacobian: None }
    }
}

/// As [`log_map_from`], starting from a [`ShootingSeed`].
pub fn log_map_seeded(
    metric: &dyn Metric,
    x: &[f64],
    y: &[f64],
    seed: ShootingSeed<'_>,
    cfg: &GeodesicSolverConfig,
) -> Result<LogMapSolution> {
    let dim = metric.dim();
    check_dim(dim, x)?;
    check_dim(dim, y)?;
    check_dim(dim, seed.tangent)?;
    let mut v = seed.tangent.to_vec();
    let known = seed.endpoint.filter(|e| e.len() == dim && e.iter().all(|a| a.is_finite()));
    let first = match known {
        Some(end) => {
            let residual: Vec<f64> = end.iter().zip(y).map(|(a, b)| a - b).collect();
            let n = norm(&residual);
            Some(Shot { residual, norm: n, mesh: None })
        }
        None => shoot(metric, x, y, &v, cfg),
    };
    let mut shot = match first {
        Some(s) => s,
        None => {
            // The zero velocity always integrates.
            v.iter_mut().for_each(|a| *a = 0.0);
            shoot(metric, x, y, &v, cfg).ok_or(LandError::BvpNotConverged { iterations: 0, residual: f64::INFINITY })?
        }
    };
    let mut iterations = 0;
    let mut jac: Option<DMatrix<f64>> = seed.jacobian.filter(|j| j.nrows() == dim && j.ncols() == dim).cloned();
    let mut fresh = false;
    while shot.norm > cfg.bvp_tol {
        if iterations >= cfg.bvp_max_iter {
            return Err(LandError::BvpNotConverged { iterations, residual: shot.norm });
        }
        iterations += 1;
        if jac.is_none() {
            if shot.mesh.is_none() {
                match shoot(metric, x, y, &v, cfg) {
                    Some(s) => shot = s,
                    None => return Err(LandError::BvpNotConverged { iterations, residual: shot.norm }),
                }
            }
            jac = fd_jacobian(metric, x, &v, &shot, y, cfg);
            fresh = true;
        }
        let Some(j) = jac.as_mut() else {
            return Err(LandError::BvpNotConverged { iterations, residual: shot.norm });
        };
        let Some(step) = newton_step(j, &shot.residual) else {
            if fresh {
                return Err(LandError::BvpNotConverged { iterations, residual: shot.norm });
            }
            jac = None;
            continue;
        };

        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, s)| a + lambda * s).collect();
            if let Some(s) = shoot(metric, x, y, &trial, cfg) {
                if s.norm < shot.norm {
                    accepted = Some((trial, s, lambda));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, s, lambda)) => {
                // Broyden: J += (dr - J dv) dv^T / (dv^T dv)
                let dv = step * lambda;
                let dr = DVector::from_iterator(dim, s.residual.iter().zip(&shot.residual).map(|(a, b)| a - b));
                let denom = dv.dot(&dv);
                if denom > 0.0 {
                    let corr = (dr - &*j * &dv) / denom;
                    *j += corr * dv.transpose();
                }
                fresh = false;
                v = trial;
                shot = s;
            }
            None if fresh => return Err(LandError::BvpNotConverged { iterations, residual: shot.norm }),
            None => jac = None,
        }
    }
    Ok(LogMapSolution { tangent: v, residual: shot.norm, iterations, jacobian: jac })
}

/// Logarithm map: the initial velocity of the geodesic from `x` reaching `y`
/// at t = 1.
pub fn log_map(metric: &dyn Metric, x: &[f64], y: &[f64], cfg: &GeodesicSolverConfig) -> Result<Vec<f64>> {
    let guess = match cfg.initial_guess {
        InitialGuess::StraightLine => y.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>(),
    };
    match log_map_from(metric, x, y, &guess, cfg) {
        Ok(s) => Ok(s.tangent),
        Err(err) => chord_continuation(metric, x, y, cfg).ok_or(err),
    }
}

/// Fallback for targets that single shooting cannot reach from the straight
/// line: the target slides from `x` to `y` along the chord and each solve
/// starts from the previous velocity (scaled to the new target) and Jacobian.
/// The step halves on failure, down to 1/256 of the chord.
fn chord_continuation(metric: &dyn Metric, x: &[f64], y: &[f64], cfg: &GeodesicSolverConfig) -> Option<Vec<f64>> {
    let target = |t: f64| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a + t * (b - a)).collect() };
    let (mut t, mut dt) = (0.0f64, 0.25f64);
    let mut v = vec![0.0; x.len()];
    let mut jac: Option<DMatrix<f64>> = None;
    while t < 1.0 {
        let next = (t + dt).min(1.0);
        let guess: Vec<f64> = if t == 0.0 {
            target(next).iter().zip(x).map(|(a, b)| a - b).collect()
        } else {
            v.iter().map(|a| a * next / t).collect()
        };
        let seed = ShootingSeed { tangent: &guess, endpoint: None, jacobian: jac.as_ref() };
        match log_map_seeded(metric, x, &target(next), seed, cfg) {
            Ok(s) => {
                t = next;
                v = s.tangent;
                jac = s.jacobian;
                dt = (dt * 2.0).min(0.25);
            }
            Err(_) if dt > 1.0 / 256.0 => dt *= 0.5,
            Err(_) => return None,
        }
    }
    Some(v)
}

/// Logarithm map warm-started from `guess`, retrying from the configured
/// initial guess when the warm start fails.
pub fn log_map_warm(
    metric: &dyn Metric,
    x: &[f64],
    y: &[f64],
    guess: Option<&[f64]>,
    cfg: &GeodesicSolverConfig,
) -> Result<Vec<f64>> {
    if let Some(g) = guess {
        if let Ok(s) = log_map_from(metric, x, y, g, cfg) {
            return Ok(s.tangent);
        }
    }
    log_map(metric, x, y, cfg)
}

/// Geodesic distance, the metric norm of `Log_x(y)` at `x`.
pub fn geodesic_distance(metric: &dyn Metric, x: &[f64], y: &[f64], cfg: &GeodesicSolverConfig) -> Result<f64> {
    let v = log_map(metric, x, y, cfg)?;
    Ok(metric.squared_norm(x, &v)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataMatrix;
    use crate::metric::{ConstantMetric, LearnedMetric, MetricParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_anchor() -> LearnedMetric {
        let data = DataMatrix::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        LearnedMetric::new(data, MetricParams::new(1.0, 0.1).unwrap()).unwrap()
    }

    /// Literal vec/Kronecker evaluation of the geodesic equation with dense
    /// matrices: -1/2 M^-1 [ 2 (I (x) v^T) dvec[M]/dx v - dvec[M]/dx^T (v (x) v) ].
    fn kronecker_rhs(metric: &dyn Metric, x: &[f64], v: &[f64]) -> Vec<f64> {
        let d = x.len();
        let diag = metric.metric_tensor(x).unwrap();
        let jac = metric.metric_derivative(x).unwrap();
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(&diag));
        // dvec[M]/dx: D^2 x D, vec stacks columns so M_ij sits at row j*D + i.
        let mut dvec = DMatrix::<f64>::zeros(d * d, d);
        for i in 0..d {
            for k in 0..d {
                dvec[(i * d + i, k)] = jac[i * d + k];
            }
        }
        let vv = DVector::from_column_slice(v);
        let kron_vv = vv.kronecker(&vv);
        let eye_kron_vt = DMatrix::<f64>::identity(d, d).kronecker(&vv.transpose());
        let bracket = (eye_kron_vt * &dvec * &vv) * 2.0 - dvec.transpose() * kron_vv;
        let a = m.try_inverse().unwrap() * bracket * -0.5;
        a.iter().copied().collect()
    }

    #[test]
    fn rhs_matches_kronecker_form() {
        let m = two_anchor();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5)];
            let v = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let fast = geodesic_rhs(&m, &x, &v).unwrap();
            let lit = kronecker_rhs(&m, &x, &v);
            for d in 0..2 {
                assert!((fast[d] - lit[d]).abs() <= 1e-12 * (1.0 + lit[d].abs()), "{fast:?} vs {lit:?}");
            }
        }
    }

    #[test]
    fn rhs_matches_kronecker_form_in_three_dimensions() {
        let data = DataMatrix::from_rows(&[[0.0, 0.1, -0.3], [0.5, -0.2, 0.4], [-0.6, 0.3, 0.2], [0.2, 0.9, -0.1]]).unwrap();
        let m = LearnedMetric::new(data, MetricParams::new(0.7, 0.05).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = geodesic_rhs(&m, &x, &v).unwrap();
            let lit = kronecker_rhs(&m, &x, &v);
            for d in 0..3 {
                assert!((fast[d] - lit[d]).abs() <= 1e-12 * (1.0 + lit[d].abs()));
            }
        }
    }

    #[test]
    fn rhs_vanishes_for_constant_metric_and_zero_velocity() {
        let c = ConstantMetric::new(vec![2.0, 0.5]).unwrap();
        assert_eq!(geodesic_rhs(&c, &[0.3, 0.1], &[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let m = two_anchor();
        assert_eq!(geodesic_rhs(&m, &[0.3, 0.1], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn exp_under_constant_metric_is_translation() {
        let cfg = GeodesicSolverConfig::default();
        let id = ConstantMetric::identity(2);
        let (end, curve) = exp_map(&id, &[0.5, -1.0], &[2.0, 3.0], &cfg).unwrap();
        assert!((end[0] - 2.5).abs() <= 1e-8 && (end[1] - 2.0).abs() <= 1e-8);
        assert!((curve.length(&id) - 13f64.sqrt()).abs() < 1e-8);

        let c = ConstantMetric::new(vec![4.0, 0.25]).unwrap();
        let (end, curve) = exp_map(&c, &[0.0, 0.0], &[1.0, 2.0], &cfg).unwrap();
        assert!((end[0] - 1.0).abs() <= 1e-8 && (end[1] - 2.0).abs() <= 1e-8);
        assert!((curve.length(&c) - (4.0f64 + 1.0).sqrt()).abs() < 1e-8);

        let (end, _) = exp_map(&two_anchor(), &[0.2, 0.3], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(end, vec![0.2, 0.3]);
    }

    #[test]
    fn exp_length_equals_initial_speed() {
        let m = two_anchor();
        let cfg = GeodesicSolverConfig { ivp_rel_tol: 1e-9, ivp_abs_tol: 1e-11, ..Default::default() };
        let x = [-0.4, 0.2];
        let v = [1.5, -0.7];
        let (_, curve) = exp_map(&m, &x, &v, &cfg).unwrap();
        let expected = m.squared_norm(&x, &v).unwrap().sqrt();
        let len = curve.length(&m);
        assert!((len - expected).abs() / expected < 1e-4, "{len} vs {expected}");
    }

    #[test]
    fn scaled_velocity_traces_prefix() {
        let m = two_anchor();
        let cfg = GeodesicSolverConfig { ivp_rel_tol: 1e-9, ivp_abs_tol: 1e-11, ..Default::default() };
        let x = [-0.8, 0.3];
        let v = [1.6, -0.2];
        let (_, curve) = exp_map(&m, &x, &v, &cfg).unwrap();
        for t in [0.25, 0.5, 0.8] {
            let tv: Vec<f64> = v.iter().map(|a| a * t).collect();
            let end = exp_endpoint(&m, &x, &tv, &cfg).unwrap();
            let (p, _) = curve.evaluate(t);
            assert!(norm(&[end[0] - p[0], end[1] - p[1]]) < 1e-5, "t={t}: {end:?} vs {p:?}");
        }
    }

    #[test]
    fn rk4_fallback_agrees_with_adaptive() {
        let m = two_anchor();
        let adaptive = GeodesicSolverConfig { ivp_rel_tol: 1e-10, ivp_abs_tol: 1e-12, ..Default::default() };
        let fixed = GeodesicSolverConfig { integrator: Integrator::Rk4 { steps: 200 }, ..Default::default() };
        let a = exp_endpoint(&m, &[0.1, 0.4], &[1.0, -1.0], &adaptive).unwrap();
        let b = exp_endpoint(&m, &[0.1, 0.4], &[1.0, -1.0], &fixed).unwrap();
        assert!(norm(&[a[0] - b[0], a[1] - b[1]]) < 1e-7);
        let v = log_map(&m, &[0.1, 0.4], &a, &fixed).unwrap();
        assert!(norm(&[v[0] - 1.0, v[1] + 1.0]) < 1e-4);
    }

    #[test]
    fn log_of_identity_and_constant_metric() {
        let cfg = GeodesicSolverConfig::default();
        let m = two_anchor();
        assert_eq!(log_map(&m, &[0.3, 0.2], &[0.3, 0.2], &cfg).unwrap(), vec![0.0, 0.0]);
        let id = ConstantMetric::identity(2);
        let v = log_map(&id, &[1.0, 2.0], &[-0.5, 4.0], &cfg).unwrap();
        assert!((v[0] + 1.5).abs() < 1e-8 && (v[1] - 2.0).abs() < 1e-8);
        assert!((geodesic_distance(&id, &[0.0, 0.0], &[3.0, 4.0], &cfg).unwrap() - 5.0).abs() < 1e-8);
        assert_eq!(geodesic_distance(&m, &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn exp_log_roundtrip_two_anchor() {
        let m = two_anchor();
        let cfg = GeodesicSolverConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5)];
            let y = [rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5)];
            let v = log_map(&m, &x, &y, &cfg).unwrap();
            let end = exp_endpoint(&m, &x, &v, &cfg).unwrap();
            assert!(norm(&[end[0] - y[0], end[1] - y[1]]) <= 1e-4 * 2.0);
        }
    }

    #[test]
    fn distance_is_nearly_symmetric() {
        let m = two_anchor();
        let cfg = GeodesicSolverConfig { bvp_tol: 1e-8, ivp_rel_tol: 1e-9, ivp_abs_tol: 1e-11, ..Default::default() };
        let a = [-0.9, 0.3];
        let b = [0.7, -0.2];
        let dab = geodesic_distance(&m, &a, &b, &cfg).unwrap();
        let dba = geodesic_distance(&m, &b, &a, &cfg).unwrap();
        assert!((dab - dba).abs() / dab < 1e-5, "{dab} vs {dba}");
    }

    #[test]
    fn step_limit_is_reported_with_partial_curve() {
        let m = two_anchor();
        let cfg = GeodesicSolverConfig { max_steps: 1, ivp_rel_tol: 1e-12, ivp_abs_tol: 1e-14, ..Default::default() };
        match exp_map(&m, &[0.0, 0.0], &[3.0, 1.0], &cfg) {
            Err(LandError::StepLimit { partial, .. }) => assert_eq!(partial.start(), &[0.0, 0.0]),
            other => panic!("expected step limit, got {other:?}"),
        }
    }

    #[test]
    fn curve_nodes_are_ordered_on_unit_interval() {
        let (_, curve) = exp_map(&two_anchor(), &[0.0, 0.2], &[1.0, 1.0], &GeodesicSolverConfig::default()).unwrap();
        let n = curve.nodes();
        assert_eq!(n[0].t, 0.0);
        assert_eq!(n[n.len() - 1].t, 1.0);
        assert!(n.windows(2).all(|w| w[1].t > w[0].t));
    }
}
