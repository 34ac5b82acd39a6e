//! Estimation variables, the two error-state conventions and the gauge
//! (unobservable) transformation of the world frame.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lie::{se23_exp, se23_log, skew, so3_exp, so3_log, TangentSE23, Vector9, SE23};

pub type Vector15 = SVector<f64, 15>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type NullBlock = SMatrix<f64, 15, 4>;

/// Dimension of one state's error vector.
pub const STATE_DIM: usize = 15;

/// Offsets of the error blocks inside a state's 15-vector.
pub const ROT: usize = 0;
pub const VEL: usize = 3;
pub const POS: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;

/// World gravity, z up.
pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

/// Unit direction of gravity; the unobservable yaw rotates about it.
pub fn gauge_axis() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorFormulation {
    Traditional,
    RightInvariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub nav: SE23,
    pub bias_g: Vector3<f64>,
    pub bias_a: Vector3<f64>,
    pub stamp: f64,
}

impl SystemState {
    pub fn new(nav: SE23, bias_g: Vector3<f64>, bias_a: Vector3<f64>, stamp: f64) -> Self {
        SystemState { nav, bias_g, bias_a, stamp }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        self.nav.r.matrix()
    }
}

/// Point stored as `(x/z, y/z, 1/z)` in the camera frame of its anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseDepthLandmark {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    /// Frame index of the anchor camera.
    pub anchor: usize,
}

impl InverseDepthLandmark {
    pub fn homogeneous(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.alpha, self.beta, 1.0, self.rho)
    }

    pub fn params(&self) -> Vector3<f64> {
        Vector3::new(self.alpha, self.beta, self.rho)
    }
}

/// Stacked error `(dtheta, dv, dp, db_g, db_a)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorVector {
    pub xi_pi: TangentSE23,
    pub db_g: Vector3<f64>,
    pub db_a: Vector3<f64>,
}

impl ErrorVector {
    pub fn zeros() -> Self {
        ErrorVector {
            xi_pi: TangentSE23::zeros(),
            db_g: Vector3::zeros(),
            db_a: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> Vector15 {
        let mut x = Vector15::zeros();
        x.fixed_rows_mut::<9>(0).copy_from(&self.xi_pi.to_vector());
        x.fixed_rows_mut::<3>(BG).copy_from(&self.db_g);
        x.fixed_rows_mut::<3>(BA).copy_from(&self.db_a);
        x
    }

    pub fn from_vector(x: &Vector15) -> Self {
        let nav: Vector9 = x.fixed_rows::<9>(0).into_owned();
        ErrorVector {
            xi_pi: TangentSE23::from_vector(&nav),
            db_g: x.fixed_rows::<3>(BG).into_owned(),
            db_a: x.fixed_rows::<3>(BA).into_owned(),
        }
    }
}

/// World-frame change `xi = [dphi, dt]`: yaw about gravity then translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaugeTransform {
    pub dphi: f64,
    pub dt: Vector3<f64>,
}

impl GaugeTransform {
    pub fn from_vector(xi: &nalgebra::Vector4<f64>) -> Self {
        GaugeTransform {
            dphi: xi[0],
            dt: Vector3::new(xi[1], xi[2], xi[3]),
        }
    }
}

/// `eta(x, xbar)`.
pub fn error(f: ErrorFormulation, x: &SystemState, xbar: &SystemState) -> Result<ErrorVector> {
    let xi_pi = match f {
        // Skip the round-off of X X^-1 so identical states give an exact zero.
        _ if x.nav == xbar.nav => TangentSE23::zeros(),
        ErrorFormulation::Traditional => TangentSE23 {
            dtheta: so3_log(&(x.nav.r * xbar.nav.r.inverse()))?,
            dv: x.nav.v - xbar.nav.v,
            dp: x.nav.p - xbar.nav.p,
        },
        ErrorFormulation::RightInvariant => se23_log(&(x.nav * xbar.nav.inverse()))?,
    };
    Ok(ErrorVector {
        xi_pi,
        db_g: x.bias_g - xbar.bias_g,
        db_a: x.bias_a - xbar.bias_a,
    })
}

/// `eta^-1(xbar, dx)`; the result keeps the stamp of `xbar`.
pub fn retract(f: ErrorFormulation, xbar: &SystemState, dx: &ErrorVector) -> SystemState {
    let nav = match f {
        ErrorFormulation::Traditional => SE23 {
            r: so3_exp(&dx.xi_pi.dtheta) * xbar.nav.r,
            v: xbar.nav.v + dx.xi_pi.dv,
            p: xbar.nav.p + dx.xi_pi.dp,
        },
        ErrorFormulation::RightInvariant => se23_exp(&dx.xi_pi) * xbar.nav,
    };
    SystemState {
        nav: SE23 { r: nav.r.renormalize_if_needed(), ..nav },
        bias_g: xbar.bias_g + dx.db_g,
        bias_a: xbar.bias_a + dx.db_a,
        stamp: xbar.stamp,
    }
}

pub fn retract_vec(f: ErrorFormulation, xbar: &SystemState, dx: &Vector15) -> SystemState {
    retract(f, xbar, &ErrorVector::from_vector(dx))
}

pub fn error_vec(f: ErrorFormulation, x: &SystemState, xbar: &SystemState) -> Result<Vector15> {
    error(f, x, xbar).map(|e| e.to_vector())
}

pub fn gauge_transform(xi: &GaugeTransform, x: &SystemState) -> SystemState {
    let yaw = so3_exp(&(gauge_axis() * xi.dphi));
    SystemState {
        nav: SE23 {
            r: yaw * x.nav.r,
            v: yaw * x.nav.v,
            p: yaw * x.nav.p + xi.dt,
        },
        ..*x
    }
}

/// Derivative of the error of a gauge-transformed state with respect to
/// `[dphi, dt]`, evaluated at `xbar`.
pub fn nullspace_block(f: ErrorFormulation, xbar: &SystemState) -> NullBlock {
    let u = gauge_axis();
    let mut n = NullBlock::zeros();
    n.fixed_view_mut::<3, 1>(ROT, 0).copy_from(&u);
    n.fixed_view_mut::<3, 3>(POS, 1).copy_from(&Matrix3::identity());
    if f == ErrorFormulation::Traditional {
        n.fixed_view_mut::<3, 1>(VEL, 0).copy_from(&(-skew(&xbar.nav.v) * u));
        n.fixed_view_mut::<3, 1>(POS, 0).copy_from(&(-skew(&xbar.nav.p) * u));
    }
    n
}
