//! Matrix Lie group primitives for SO(3) and SE_2(3).
//!
//! Rotations are stored as 3x3 matrices. An SE_2(3) element bundles a
//! rotation with a velocity and a position column, embedded as
//!
//! ```text
//! | R  v  p |
//! | 0  1  0 |
//! | 0  0  1 |
//! ```
//!
//! Tangent vectors are ordered `(dtheta, dv, dp)`. All maps here use the
//! left (world-frame) convention: `exp(xi + d) ~= exp(J_l(xi) d) exp(xi)`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix5, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;

/// Below this angle the trigonometric coefficients switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Coefficients such as `(t - sin t) / t^3` lose all precision well above
/// `SMALL_ANGLE`; they are evaluated from their series below this angle.
const SERIES_ANGLE: f64 = 0.25;

/// Largest rotation angle accepted by the logarithm maps.
pub const MAX_LOG_ANGLE: f64 = PI - 1e-6;

const ORTHO_TOLERANCE: f64 = 1e-9;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; uses the antisymmetric part of `m`.
pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

// Coefficient functions of the rotation angle t.

/// sin(t) / t
fn sinc(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        1.0 - t * t / 6.0
    } else {
        t.sin() / t
    }
}

/// (1 - cos t) / t^2, written without cancellation.
fn one_minus_cos_sq(t: f64) -> f64 {
    let s = sinc(0.5 * t);
    0.5 * s * s
}

/// (t - sin t) / t^3
fn t_minus_sin_cube(t: f64) -> f64 {
    if t < SERIES_ANGLE {
        let t2 = t * t;
        1.0 / 6.0
            - t2 * (1.0 / 120.0
                - t2 * (1.0 / 5040.0 - t2 * (1.0 / 362880.0 - t2 / 39916800.0)))
    } else {
        (t - t.sin()) / (t * t * t)
    }
}

/// 1 / t^2 - (1 + cos t) / (2 t sin t)
fn inv_jacobian_coeff(t: f64) -> f64 {
    if t < SERIES_ANGLE {
        let t2 = t * t;
        1.0 / 12.0
            + t2 * (1.0 / 720.0
                + t2 * (1.0 / 30240.0 + t2 * (1.0 / 1209600.0 + t2 / 47900160.0)))
    } else {
        1.0 / (t * t) - (1.0 + t.cos()) / (2.0 * t * t.sin())
    }
}

/// (t^2 + 2 cos t - 2) / (2 t^4)
fn q_coeff2(t: f64) -> f64 {
    if t < SERIES_ANGLE {
        let t2 = t * t;
        1.0 / 24.0
            - t2 * (1.0 / 720.0
                - t2 * (1.0 / 40320.0 - t2 * (1.0 / 3628800.0 - t2 / 479001600.0)))
    } else {
        let t2 = t * t;
        (t2 + 2.0 * t.cos() - 2.0) / (2.0 * t2 * t2)
    }
}

/// (2 t - 3 sin t + t cos t) / (2 t^5)
fn q_coeff3(t: f64) -> f64 {
    if t < SERIES_ANGLE {
        let t2 = t * t;
        1.0 / 120.0
            - t2 * (1.0 / 2520.0
                - t2 * (1.0 / 120960.0 - t2 * (1.0 / 9979200.0 - t2 / 1245404160.0)))
    } else {
        let t2 = t * t;
        (2.0 * t - 3.0 * t.sin() + t * t.cos()) / (2.0 * t2 * t2 * t)
    }
}

/// A rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot3(Matrix3<f64>);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Matrix3::identity())
    }

    /// Wraps `m` without checking it. Callers own the invariant.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rot3(m)
    }

    /// Accepts `m` if it is orthonormal with unit determinant to 1e-9.
    pub fn try_from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let r = Rot3(m);
        if r.orthonormality_defect() <= ORTHO_TOLERANCE && (m.determinant() - 1.0).abs() <= ORTHO_TOLERANCE
        {
            Some(r)
        } else {
            None
        }
    }

    /// Rotation by `angle` about the (not necessarily unit) `axis`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rot3(self.0.transpose())
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    /// Nearest rotation in the Frobenius sense (polar projection).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rot3(u * d * v_t)
    }

    /// Projects back onto SO(3) only once drift exceeds the tolerance.
    pub fn renormalize_if_needed(&self) -> Self {
        if self.orthonormality_defect() > ORTHO_TOLERANCE {
            self.orthonormalized()
        } else {
            *self
        }
    }

    pub fn angle(&self) -> f64 {
        let s = unskew(&self.0).norm();
        let c = 0.5 * (self.0.trace() - 1.0);
        s.atan2(c)
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rot3 {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rot3 {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

pub fn so3_exp(w: &Vector3<f64>) -> Rot3 {
    let t = w.norm();
    let k = skew(w);
    Rot3(Matrix3::identity() + k * sinc(t) + k * k * one_minus_cos_sq(t))
}

pub fn so3_log(r: &Rot3) -> Result<Vector3<f64>> {
    let m = r.matrix();
    let axis_sin = unskew(m);
    let s = axis_sin.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let t = s.atan2(c);
    if t > MAX_LOG_ANGLE {
        return Err(Error::AngleNearPi { angle: t });
    }
    // axis_sin = axis * sin(t)
    Ok(axis_sin / sinc(t))
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let t = w.norm();
    let k = skew(w);
    Matrix3::identity() + k * one_minus_cos_sq(t) + k * k * t_minus_sin_cube(t)
}

pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let t = w.norm();
    let k = skew(w);
    Matrix3::identity() - k * 0.5 + k * k * inv_jacobian_coeff(t)
}

/// Coupling block of the SE(3)-type left Jacobian for the translational
/// part `rho` under rotation `phi`.
fn q_block(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let ppr = p * pr;
    let rpp = rp * p;
    r * 0.5
        + (pr + rp + prp) * t_minus_sin_cube(t)
        + (ppr + rpp - prp * 3.0) * q_coeff2(t)
        + (prp * p + p * prp) * q_coeff3(t)
}

/// Element of the extended pose group SE_2(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE23 {
    pub r: Rot3,
    pub v: Vector3<f64>,
    pub p: Vector3<f64>,
}

impl SE23 {
    pub fn identity() -> Self {
        SE23 {
            r: Rot3::identity(),
            v: Vector3::zeros(),
            p: Vector3::zeros(),
        }
    }

    pub fn new(r: Rot3, v: Vector3<f64>, p: Vector3<f64>) -> Self {
        SE23 { r, v, p }
    }

    pub fn to_matrix(&self) -> Matrix5<f64> {
        let mut m = Matrix5::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.v);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.p);
        m
    }

    pub fn from_matrix_unchecked(m: &Matrix5<f64>) -> Self {
        SE23 {
            r: Rot3::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into_owned()),
            v: m.fixed_view::<3, 1>(0, 3).into_owned(),
            p: m.fixed_view::<3, 1>(0, 4).into_owned(),
        }
    }

    pub fn inverse(&self) -> Self {
        se23_inverse(self)
    }

    /// Adjoint matrix acting on `(dtheta, dv, dp)`.
    pub fn adjoint(&self) -> Matrix9 {
        let r = self.r.matrix();
        let mut ad = Matrix9::zeros();
        for b in 0..3 {
            ad.fixed_view_mut::<3, 3>(3 * b, 3 * b).copy_from(r);
        }
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&self.v) * r));
        ad.fixed_view_mut::<3, 3>(6, 0).copy_from(&(skew(&self.p) * r));
        ad
    }
}

impl Mul for SE23 {
    type Output = SE23;
    fn mul(self, rhs: SE23) -> SE23 {
        se23_compose(&self, &rhs)
    }
}

/// Tangent vector of SE_2(3), stacked as `(dtheta, dv, dp)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentSE23 {
    pub dtheta: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dp: Vector3<f64>,
}

impl TangentSE23 {
    pub fn zeros() -> Self {
        TangentSE23 {
            dtheta: Vector3::zeros(),
            dv: Vector3::zeros(),
            dp: Vector3::zeros(),
        }
    }

    pub fn from_vector(x: &Vector9) -> Self {
        TangentSE23 {
            dtheta: x.fixed_rows::<3>(0).into_owned(),
            dv: x.fixed_rows::<3>(3).into_owned(),
            dp: x.fixed_rows::<3>(6).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector9 {
        let mut x = Vector9::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.dtheta);
        x.fixed_rows_mut::<3>(3).copy_from(&self.dv);
        x.fixed_rows_mut::<3>(6).copy_from(&self.dp);
        x
    }

    /// Lie algebra element as a 5x5 matrix.
    pub fn hat(&self) -> Matrix5<f64> {
        let mut m = Matrix5::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.dtheta));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.dv);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.dp);
        m
    }

    pub fn vee(m: &Matrix5<f64>) -> Self {
        TangentSE23 {
            dtheta: unskew(&m.fixed_view::<3, 3>(0, 0).into_owned()),
            dv: m.fixed_view::<3, 1>(0, 3).into_owned(),
            dp: m.fixed_view::<3, 1>(0, 4).into_owned(),
        }
    }
}

pub fn se23_exp(xi: &TangentSE23) -> SE23 {
    let jl = so3_left_jacobian(&xi.dtheta);
    SE23 {
        r: so3_exp(&xi.dtheta),
        v: jl * xi.dv,
        p: jl * xi.dp,
    }
}

pub fn se23_log(x: &SE23) -> Result<TangentSE23> {
    let dtheta = so3_log(&x.r)?;
    let jl_inv = so3_left_jacobian_inv(&dtheta);
    Ok(TangentSE23 {
        dtheta,
        dv: jl_inv * x.v,
        dp: jl_inv * x.p,
    })
}

pub fn se23_compose(a: &SE23, b: &SE23) -> SE23 {
    SE23 {
        r: a.r * b.r,
        v: a.r * b.v + a.v,
        p: a.r * b.p + a.p,
    }
}

pub fn se23_inverse(a: &SE23) -> SE23 {
    let rt = a.r.inverse();
    SE23 {
        r: rt,
        v: -(rt * a.v),
        p: -(rt * a.p),
    }
}

/// Left Jacobian of SE_2(3) in closed form.
pub fn se23_left_jacobian(xi: &TangentSE23) -> Matrix9 {
    let jl = so3_left_jacobian(&xi.dtheta);
    let mut j = Matrix9::zeros();
    for b in 0..3 {
        j.fixed_view_mut::<3, 3>(3 * b, 3 * b).copy_from(&jl);
    }
    j.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&q_block(&xi.dtheta, &xi.dv));
    j.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&q_block(&xi.dtheta, &xi.dp));
    j
}

pub fn se23_left_jacobian_inv(xi: &TangentSE23) -> Matrix9 {
    let jl_inv = so3_left_jacobian_inv(&xi.dtheta);
    let mut j = Matrix9::zeros();
    for b in 0..3 {
        j.fixed_view_mut::<3, 3>(3 * b, 3 * b).copy_from(&jl_inv);
    }
    let qv = q_block(&xi.dtheta, &xi.dv);
    let qp = q_block(&xi.dtheta, &xi.dp);
    j.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-jl_inv * qv * jl_inv));
    j.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-jl_inv * qp * jl_inv));
    j
}
