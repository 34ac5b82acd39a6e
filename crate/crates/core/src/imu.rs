//! IMU propagation, discrete transition matrices, process noise and the
//! IMU residual factor.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{se23_left_jacobian_inv, skew, so3_left_jacobian_inv, Rot3, TangentSE23, SE23};
use crate::state::{
    error, gravity, ErrorFormulation, ErrorVector, Matrix15, SystemState, BA, BG, POS, ROT, VEL,
};

/// Knots closer than this are treated as the same instant, so frame stamps
/// that differ from sample stamps by round-off do not create sliver steps.
const STAMP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub stamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities and the sample rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuNoiseConfig {
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
    pub rate: f64,
}

impl Default for ImuNoiseConfig {
    fn default() -> Self {
        ImuNoiseConfig {
            sigma_g: 1.2e-3,
            sigma_a: 8e-3,
            sigma_bg: 2e-5,
            sigma_ba: 5.5e-5,
            rate: 100.0,
        }
    }
}

impl ImuNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba, self.rate];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("IMU noise parameters must be positive".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JacobianMode {
    Exact,
    IdentityApprox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationResult {
    pub state: SystemState,
    pub phi: Matrix15,
    pub cov: Matrix15,
}

/// Bias-corrected inputs at one instant.
#[derive(Clone, Copy)]
struct Input {
    w: Vector3<f64>,
    a: Vector3<f64>,
}

fn nav_rate(nav: &SE23, rdot_input: &Input) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let r = nav.r.matrix();
    (r * skew(&rdot_input.w), r * rdot_input.a + gravity(), nav.v)
}

/// One RK4 step of `R' = R w^, v' = R a + g, p' = v` with inputs varying
/// linearly from `u0` to `u1`.
fn rk4_step(nav: &SE23, u0: &Input, u1: &Input, dt: f64) -> SE23 {
    let um = Input {
        w: 0.5 * (u0.w + u1.w),
        a: 0.5 * (u0.a + u1.a),
    };
    let shift = |n: &SE23, k: &(Matrix3<f64>, Vector3<f64>, Vector3<f64>), h: f64| SE23 {
        r: Rot3::from_matrix_unchecked(n.r.matrix() + k.0 * h),
        v: n.v + k.1 * h,
        p: n.p + k.2 * h,
    };
    let k1 = nav_rate(nav, u0);
    let k2 = nav_rate(&shift(nav, &k1, 0.5 * dt), &um);
    let k3 = nav_rate(&shift(nav, &k2, 0.5 * dt), &um);
    let k4 = nav_rate(&shift(nav, &k3, dt), u1);
    let h = dt / 6.0;
    let r = nav.r.matrix() + (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0) * h;
    SE23 {
        r: Rot3::from_matrix_unchecked(r).renormalize_if_needed(),
        v: nav.v + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * h,
        p: nav.p + (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2) * h,
    }
}

fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let s = if b.stamp > a.stamp { (t - a.stamp) / (b.stamp - a.stamp) } else { 0.0 };
    ImuSample {
        stamp: t,
        gyro: a.gyro + (b.gyro - a.gyro) * s,
        accel: a.accel + (b.accel - a.accel) * s,
    }
}

/// Samples at `t0`, every raw stamp strictly inside `(t0, t1)`, and `t1`,
/// with the endpoints linearly interpolated.
pub fn knots(samples: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    if samples.is_empty() {
        return Err(Error::EmptySampleWindow);
    }
    if let Some(i) = (1..samples.len()).find(|&i| samples[i].stamp <= samples[i - 1].stamp) {
        return Err(Error::NonMonotoneStamps { index: i });
    }
    let (first, last) = (samples[0].stamp, samples[samples.len() - 1].stamp);
    if first > t0 + STAMP_EPS || last < t1 - STAMP_EPS {
        return Err(Error::MissingImuCoverage { first, last, start: t0, end: t1 });
    }
    let at = |t: f64| -> ImuSample {
        let k = samples.partition_point(|s| s.stamp <= t);
        match k {
            0 => ImuSample { stamp: t, ..samples[0] },
            k if k == samples.len() => ImuSample { stamp: t, ..samples[k - 1] },
            k => interpolate(&samples[k - 1], &samples[k], t),
        }
    };
    let mut out = vec![at(t0)];
    for s in samples {
        if s.stamp > t0 + STAMP_EPS && s.stamp < t1 - STAMP_EPS {
            out.push(*s);
        }
    }
    if t1 > t0 + STAMP_EPS {
        out.push(at(t1));
    }
    Ok(out)
}

fn corrected(s: &ImuSample, x: &SystemState) -> Input {
    Input {
        w: s.gyro - x.bias_g,
        a: s.accel - x.bias_a,
    }
}

/// Nav-state integration only; no Jacobians or covariance.
pub fn integrate(x: &SystemState, samples: &[ImuSample], t_end: f64) -> Result<SystemState> {
    let ks = knots(samples, x.stamp, t_end)?;
    let mut nav = x.nav;
    for w in ks.windows(2) {
        nav = rk4_step(&nav, &corrected(&w[0], x), &corrected(&w[1], x), w[1].stamp - w[0].stamp);
    }
    Ok(SystemState { nav, stamp: t_end, ..*x })
}

/// Columns through which gyro and accelerometer offsets enter the error
/// dynamics: `Ad_X` restricted to the input directions for the
/// right-invariant error, the world-frame rotation for the traditional one.
fn input_map(f: ErrorFormulation, x: &SE23) -> SMatrix<f64, 9, 6> {
    let r = x.r.matrix();
    let mut m = SMatrix::<f64, 9, 6>::zeros();
    m.fixed_view_mut::<3, 3>(ROT, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(VEL, 3).copy_from(r);
    if f == ErrorFormulation::RightInvariant {
        m.fixed_view_mut::<3, 3>(VEL, 0).copy_from(&(skew(&x.v) * r));
        m.fixed_view_mut::<3, 3>(POS, 0).copy_from(&(skew(&x.p) * r));
    }
    m
}

/// Bias-coupling block of one step, rows `(theta, v, p)` and columns
/// `(b_g, b_a)`: `-int_0^dt Phi_nav(dt - s) M(X(s)) ds` by Simpson's rule,
/// with the nav state at the start (`x0`), middle (`xm`) and end (`x1`) of
/// the step. The integrand is a quadratic in `s` when `X` is held fixed, so
/// the rule reproduces the familiar first-order block exactly in that case.
pub fn bias_coupling(f: ErrorFormulation, x0: &SE23, xm: &SE23, x1: &SE23, dt: f64) -> SMatrix<f64, 9, 6> {
    let start = nav_transition(f, x0, x1, dt) * input_map(f, x0);
    let mid = nav_transition(f, xm, x1, 0.5 * dt) * input_map(f, xm);
    -(start + 4.0 * mid + input_map(f, x1)) * (dt / 6.0)
}

/// Nav-state block of the transition from `x0` to `x1` over `dt`.
/// For the right-invariant error it does not depend on the states.
pub fn nav_transition(f: ErrorFormulation, x0: &SE23, x1: &SE23, dt: f64) -> SMatrix<f64, 9, 9> {
    let g = gravity();
    let mut phi = SMatrix::<f64, 9, 9>::identity();
    phi.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(Matrix3::identity() * dt));
    match f {
        ErrorFormulation::RightInvariant => {
            phi.fixed_view_mut::<3, 3>(VEL, ROT).copy_from(&(skew(&g) * dt));
            phi.fixed_view_mut::<3, 3>(POS, ROT).copy_from(&(skew(&g) * (0.5 * dt * dt)));
        }
        ErrorFormulation::Traditional => {
            let dv = x1.v - x0.v - g * dt;
            let dp = x1.p - x0.p - x0.v * dt - g * (0.5 * dt * dt);
            phi.fixed_view_mut::<3, 3>(VEL, ROT).copy_from(&(-skew(&dv)));
            phi.fixed_view_mut::<3, 3>(POS, ROT).copy_from(&(-skew(&dp)));
        }
    }
    phi
}

/// Full 15x15 transition of a single step through the midpoint `xm`.
pub fn transition_matrix(f: ErrorFormulation, x0: &SE23, xm: &SE23, x1: &SE23, dt: f64) -> Matrix15 {
    let mut phi = Matrix15::identity();
    phi.fixed_view_mut::<9, 9>(0, 0).copy_from(&nav_transition(f, x0, x1, dt));
    phi.fixed_view_mut::<9, 6>(0, BG).copy_from(&bias_coupling(f, x0, xm, x1, dt));
    phi
}

/// Integrates `x_i` over `samples` up to `t_end`, accumulating the
/// transition matrix and the covariance of the predicted state.
pub fn propagate(
    x: &SystemState,
    samples: &[ImuSample],
    t_end: f64,
    noise: &ImuNoiseConfig,
    f: ErrorFormulation,
) -> Result<PropagationResult> {
    let ks = knots(samples, x.stamp, t_end)?;
    let mut nav = x.nav;
    let mut phi = Matrix15::identity();
    let mut cov = Matrix15::zeros();
    let (qg, qa) = (noise.sigma_g.powi(2) * noise.rate, noise.sigma_a.powi(2) * noise.rate);
    for w in ks.windows(2) {
        let dt = w[1].stamp - w[0].stamp;
        let (u0, u1) = (corrected(&w[0], x), corrected(&w[1], x));
        let um = Input { w: 0.5 * (u0.w + u1.w), a: 0.5 * (u0.a + u1.a) };
        let next = rk4_step(&nav, &u0, &u1, dt);
        let mid = rk4_step(&nav, &u0, &um, 0.5 * dt);
        let step = transition_matrix(f, &nav, &mid, &next, dt);
        // White measurement noise enters exactly like a bias offset held
        // over the step; bias increments enter directly.
        let coupling = step.fixed_view::<9, 6>(0, BG).into_owned();
        let mut gqg = Matrix15::zeros();
        let mut q6 = SMatrix::<f64, 6, 6>::zeros();
        q6.fixed_view_mut::<3, 3>(0, 0).fill_diagonal(qg);
        q6.fixed_view_mut::<3, 3>(3, 3).fill_diagonal(qa);
        gqg.fixed_view_mut::<9, 9>(0, 0).copy_from(&(coupling * q6 * coupling.transpose()));
        for k in 0..3 {
            gqg[(BG + k, BG + k)] = noise.sigma_bg.powi(2) * dt;
            gqg[(BA + k, BA + k)] = noise.sigma_ba.powi(2) * dt;
        }
        cov = step * cov * step.transpose() + gqg;
        cov = 0.5 * (cov + cov.transpose());
        phi = step * phi;
        nav = next;
    }
    Ok(PropagationResult {
        state: SystemState { nav, stamp: t_end, ..*x },
        phi,
        cov,
    })
}

/// `r_x(x_i, x_pred) = eta(x_i, x_pred)`.
pub fn imu_residual(f: ErrorFormulation, x_i: &SystemState, x_pred: &SystemState) -> Result<ErrorVector> {
    error(f, x_i, x_pred)
}

/// Jacobians of the IMU residual with respect to the error states of
/// `x_i` and `x_pred`.
pub fn imu_residual_jacobians(
    f: ErrorFormulation,
    mode: JacobianMode,
    x_i: &SystemState,
    x_pred: &SystemState,
) -> Result<(Matrix15, Matrix15)> {
    if mode == JacobianMode::IdentityApprox {
        return Ok((Matrix15::identity(), -Matrix15::identity()));
    }
    let r = imu_residual(f, x_i, x_pred)?;
    let mut a_i = Matrix15::identity();
    let mut a_pred = -Matrix15::identity();
    match f {
        ErrorFormulation::Traditional => {
            a_i.fixed_view_mut::<3, 3>(ROT, ROT)
                .copy_from(&so3_left_jacobian_inv(&r.xi_pi.dtheta));
            a_pred
                .fixed_view_mut::<3, 3>(ROT, ROT)
                .copy_from(&(-so3_left_jacobian_inv(&-r.xi_pi.dtheta)));
        }
        ErrorFormulation::RightInvariant => {
            let neg = TangentSE23 {
                dtheta: -r.xi_pi.dtheta,
                dv: -r.xi_pi.dv,
                dp: -r.xi_pi.dp,
            };
            a_i.fixed_view_mut::<9, 9>(0, 0)
                .copy_from(&se23_left_jacobian_inv(&r.xi_pi));
            a_pred
                .fixed_view_mut::<9, 9>(0, 0)
                .copy_from(&(-se23_left_jacobian_inv(&neg)));
        }
    }
    Ok((a_i, a_pred))
}

/// `A_pred * Sigma_pred * A_pred^T`; fails when the result is numerically
/// singular.
pub fn process_noise_weight(prop: &PropagationResult, a_pred: &Matrix15) -> Result<Matrix15> {
    let w = a_pred * prop.cov * a_pred.transpose();
    let w = 0.5 * (w + w.transpose());
    let min = w.symmetric_eigenvalues().min();
    if min < 1e-15 {
        return Err(Error::SingularCovariance { min_eigenvalue: min });
    }
    Ok(w)
}

/// Like [`process_noise_weight`] but adds `1e-12 I` to an under-excited
/// covariance instead of failing. The flag reports whether that happened.
pub fn process_noise_weight_regularized(prop: &PropagationResult, a_pred: &Matrix15) -> (Matrix15, bool) {
    match process_noise_weight(prop, a_pred) {
        Ok(w) => (w, false),
        Err(_) => {
            let w = a_pred * prop.cov * a_pred.transpose();
            (0.5 * (w + w.transpose()) + Matrix15::identity() * 1e-12, true)
        }
    }
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inverse_sqrt(m: &Matrix15) -> Matrix15 {
    let eig = SymmetricEigen::new(*m);
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(1e-300).sqrt());
    eig.eigenvectors * Matrix15::from_diagonal(&d) * eig.eigenvectors.transpose()
}
