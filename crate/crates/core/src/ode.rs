//! Explicit Runge-Kutta integrators for autonomous systems y' = f(y).
//!
//! The adaptive integrator is Dormand-Prince 5(4) with local extrapolation.
//! Its accepted mesh can be replayed with [`integrate_on_mesh`], which makes
//! the endpoint a smooth function of the initial state; the shooting solver
//! relies on this for finite-difference Jacobians.

// Node coefficients c_i are not needed: the systems here are autonomous.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
    pub max_steps: usize,
}

/// Accepted states of an integration over [0, t_end].
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum OdeFailure {
    StepLimit(Trajectory),
    NonFinite(Trajectory),
}

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Stages {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n] }
    }
}

/// One Dormand-Prince step. Expects `st.k[0] = f(y)`; writes the 5th-order
/// solution to `y_new`, `f(y_new)` to `st.k[6]`, and the error estimate to `err`.
fn dp_step<F: FnMut(&[f64], &mut [f64])>(
    f: &mut F,
    y: &[f64],
    h: f64,
    st: &mut Stages,
    y_new: &mut [f64],
    err: Option<&mut [f64]>,
) {
    let n = y.len();
    let [k1, k2, k3, k4, k5, k6, k7] = &mut st.k;
    let tmp = &mut st.tmp;
    for i in 0..n {
        tmp[i] = y[i] + h * A21 * k1[i];
    }
    f(tmp, k2);
    for i in 0..n {
        tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
    }
    f(tmp, k3);
    for i in 0..n {
        tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    }
    f(tmp, k4);
    for i in 0..n {
        tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    }
    f(tmp, k5);
    for i in 0..n {
        tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    }
    f(tmp, k6);
    for i in 0..n {
        y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
    }
    f(y_new, k7);
    if let Some(err) = err {
        for i in 0..n {
            err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
    }
}

fn scaled_norm(v: &[f64], y0: &[f64], y1: &[f64], tol: &Tolerances) -> f64 {
    let n = v.len() as f64;
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = tol.abs + tol.rel * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn initial_step<F: FnMut(&[f64], &mut [f64])>(
    f: &mut F,
    y0: &[f64],
    f0: &[f64],
    t_end: f64,
    tol: &Tolerances,
) -> f64 {
    let d0 = scaled_norm(y0, y0, y0, tol);
    let d1 = scaled_norm(f0, y0, y0, tol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(t_end);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    f(&y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| (a - b) / h0).collect();
    let d2 = scaled_norm(&diff, y0, y0, tol);
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(t_end)
}

/// Adaptive Dormand-Prince integration from 0 to `t_end`.
pub fn integrate_adaptive<F: FnMut(&[f64], &mut [f64])>(
    mut f: F,
    y0: &[f64],
    t_end: f64,
    tol: &Tolerances,
) -> Result<Trajectory, OdeFailure> {
    let n = y0.len();
    let mut st = Stages::new(n);
    let mut traj = Trajectory { times: vec![0.0], states: vec![y0.to_vec()] };
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    f(&y, &mut st.k[0]);
    if st.k[0].iter().any(|v| !v.is_finite()) {
        return Err(OdeFailure::NonFinite(traj));
    }
    let mut t = 0.0;
    let mut h = initial_step(&mut f, &y, &st.k[0].clone(), t_end, tol);
    let mut attempts = 0;
    while t < t_end {
        if attempts >= tol.max_steps {
            return Err(OdeFailure::StepLimit(traj));
        }
        attempts += 1;
        let last = t + h >= t_end * (1.0 - 1e-12);
        if last {
            h = t_end - t;
        }
        dp_step(&mut f, &y, h, &mut st, &mut y_new, Some(&mut err));
        let e = scaled_norm(&err, &y, &y_new, tol);
        if !e.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            if h < 1e-12 {
                return Err(OdeFailure::NonFinite(traj));
            }
            h *= 0.2;
            continue;
        }
        if e <= 1.0 {
            t = if last { t_end } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            let (head, tail) = st.k.split_at_mut(6);
            head[0].copy_from_slice(&tail[0]);
            traj.times.push(t);
            traj.states.push(y.clone());
            let fac = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
        } else {
            h *= (0.9 * e.powf(-0.2)).clamp(0.2, 1.0);
        }
        if h < 1e-14 {
            return Err(OdeFailure::NonFinite(traj));
        }
    }
    Ok(traj)
}

/// Replays the Dormand-Prince 5th-order propagator on a fixed mesh and
/// returns the final state. Returns `None` on non-finite values.
pub fn integrate_on_mesh<F: FnMut(&[f64], &mut [f64])>(mut f: F, y0: &[f64], mesh: &[f64]) -> Option<Vec<f64>> {
    let n = y0.len();
    let mut st = Stages::new(n);
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    f(&y, &mut st.k[0]);
    for w in mesh.windows(2) {
        let h = w[1] - w[0];
        dp_step(&mut f, &y, h, &mut st, &mut y_new, None);
        std::mem::swap(&mut y, &mut y_new);
        let (head, tail) = st.k.split_at_mut(6);
        head[0].copy_from_slice(&tail[0]);
    }
    y.iter().all(|v| v.is_finite()).then_some(y)
}

/// Classic fixed-step RK4 over [0, t_end] with `steps` equal steps.
pub fn integrate_rk4<F: FnMut(&[f64], &mut [f64])>(
    mut f: F,
    y0: &[f64],
    t_end: f64,
    steps: usize,
) -> Result<Trajectory, OdeFailure> {
    let n = y0.len();
    let h = t_end / steps as f64;
    let mut traj = Trajectory { times: vec![0.0], states: vec![y0.to_vec()] };
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for s in 0..steps {
        f(&y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        f(&tmp, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(OdeFailure::NonFinite(traj));
        }
        let t = if s + 1 == steps { t_end } else { (s + 1) as f64 * h };
        traj.times.push(t);
        traj.states.push(y.clone());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tol() -> Tolerances {
        Tolerances { rel: 1e-9, abs: 1e-12, max_steps: 10_000 }
    }

    #[test]
    fn harmonic_oscillator_adaptive() {
        // y'' = -y, y(0) = 1, y'(0) = 0 -> y(t) = cos t.
        let f = |y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let traj = integrate_adaptive(f, &[1.0, 0.0], 3.0, &tol()).unwrap();
        let end = traj.states.last().unwrap();
        assert!((end[0] - 3.0f64.cos()).abs() < 1e-8);
        assert!((end[1] + 3.0f64.sin()).abs() < 1e-8);
        assert_eq!(*traj.times.last().unwrap(), 3.0);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn mesh_replay_reproduces_adaptive_endpoint() {
        let f = |y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0].sin();
        };
        let t = Tolerances { rel: 1e-6, abs: 1e-9, max_steps: 1000 };
        let traj = integrate_adaptive(f, &[0.5, 1.0], 1.0, &t).unwrap();
        let end = integrate_on_mesh(f, &[0.5, 1.0], &traj.times).unwrap();
        assert_eq!(&end, traj.states.last().unwrap());
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let f = |y: &[f64], dy: &mut [f64]| dy[0] = y[0];
        let e = |steps| {
            let t = integrate_rk4(f, &[1.0], 1.0, steps).unwrap();
            (t.states.last().unwrap()[0] - std::f64::consts::E).abs()
        };
        let ratio = e(10) / e(20);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn step_limit_reports_partial_trajectory() {
        let f = |y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -1e6 * y[0];
        };
        let t = Tolerances { rel: 1e-10, abs: 1e-12, max_steps: 5 };
        match integrate_adaptive(f, &[1.0, 0.0], 1.0, &t) {
            Err(OdeFailure::StepLimit(traj)) => assert!(!traj.times.is_empty()),
            other => panic!("expected step limit, got {other:?}"),
        }
    }
}
