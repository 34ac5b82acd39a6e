//! Pinhole reprojection of anchored inverse-depth landmarks, its analytic
//! Jacobians, two-view initialization and the disparity gate.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{skew, Rot3, SE23};
use crate::state::{ErrorFormulation, InverseDepthLandmark, SystemState};

/// Smallest accepted depth in the observing camera, in metres.
pub const MIN_DEPTH: f64 = 1e-6;
pub const RHO_MIN: f64 = 1e-3;
pub const RHO_MAX: f64 = 10.0;

pub type Matrix2x9 = SMatrix<f64, 2, 9>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Camera orientation in the body frame.
    pub r_bc: Rot3,
    /// Camera position in the body frame.
    pub t_bc: Vector3<f64>,
}

impl Default for CameraModel {
    /// 752x480 camera looking along the body x axis, image x to body -y and
    /// image y to body -z.
    fn default() -> Self {
        CameraModel {
            fx: 460.0,
            fy: 460.0,
            cx: 376.0,
            cy: 240.0,
            width: 752.0,
            height: 480.0,
            r_bc: Rot3::from_matrix_unchecked(Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)),
            t_bc: Vector3::new(0.05, 0.0, 0.02),
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height
            && Rot3::try_from_matrix(*self.r_bc.matrix()).is_some();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("camera intrinsics or extrinsic rotation invalid".into()))
        }
    }

    pub fn in_bounds(&self, uv: &Vector2<f64>, margin: f64) -> bool {
        uv.x >= margin && uv.x <= self.width - margin && uv.y >= margin && uv.y <= self.height - margin
    }

    /// Pixel of a point given in camera coordinates.
    pub fn pixel(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Normalized bearing `[x/z, y/z, 1]` of a pixel.
    pub fn bearing(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0)
    }

    /// Camera centre and rotation in the world for a body pose.
    pub fn camera_in_world(&self, body: &SE23) -> (Vector3<f64>, Matrix3<f64>) {
        (body.p + body.r * self.t_bc, body.r.matrix() * self.r_bc.matrix())
    }

    fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz * iz,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub landmark: usize,
    pub uv: Vector2<f64>,
    pub sigma: f64,
}

/// Intermediate points of the homogeneous chain, all scaled by `rho`.
struct Chain {
    /// Anchor-body point.
    f_ba: Vector3<f64>,
    /// World point.
    f_w: Vector3<f64>,
    /// Observing-camera point.
    f_c: Vector3<f64>,
    same_frame: bool,
}

fn chain(cam: &CameraModel, x_i: &SystemState, x_a: &SystemState, f: &InverseDepthLandmark) -> Result<Chain> {
    let h = Vector3::new(f.alpha, f.beta, 1.0);
    let rho = f.rho;
    let f_ba = cam.r_bc * h + cam.t_bc * rho;
    let f_w = x_a.nav.r * f_ba + x_a.nav.p * rho;
    let same_frame = x_i.stamp == x_a.stamp;
    let f_c = if same_frame {
        h
    } else {
        let f_bi = x_i.nav.r.inverse() * (f_w - x_i.nav.p * rho);
        cam.r_bc.inverse() * (f_bi - cam.t_bc * rho)
    };
    // Depth of the Euclidean point is z / rho; rho > 0 for admitted landmarks.
    let depth = if rho > 0.0 { f_c.z / rho } else { f64::INFINITY * f_c.z.signum() };
    if !(f_c.z > 0.0 && depth > MIN_DEPTH) {
        return Err(Error::BehindCamera { depth });
    }
    Ok(Chain { f_ba, f_w, f_c, same_frame })
}

/// Predicted pixel of landmark `f` (anchored at `x_a`) seen from `x_i`.
/// Frames are the same when their stamps are equal.
pub fn project(cam: &CameraModel, x_i: &SystemState, x_a: &SystemState, f: &InverseDepthLandmark) -> Result<Vector2<f64>> {
    chain(cam, x_i, x_a, f).map(|c| cam.pixel(&c.f_c))
}

pub fn reprojection_residual(
    cam: &CameraModel,
    x_i: &SystemState,
    x_a: &SystemState,
    f: &InverseDepthLandmark,
    z: &Observation,
) -> Result<Vector2<f64>> {
    Ok(project(cam, x_i, x_a, f)? - z.uv)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectionJacobians {
    pub observer: Matrix2x9,
    pub anchor: Matrix2x9,
    pub landmark: Matrix2x3<f64>,
}

/// Jacobians of the residual with respect to the observing nav error, the
/// anchor nav error and `(alpha, beta, rho)`.
pub fn reprojection_jacobians(
    f_form: ErrorFormulation,
    cam: &CameraModel,
    x_i: &SystemState,
    x_a: &SystemState,
    f: &InverseDepthLandmark,
) -> Result<ReprojectionJacobians> {
    let c = chain(cam, x_i, x_a, f)?;
    if c.same_frame {
        return Ok(ReprojectionJacobians {
            observer: Matrix2x9::zeros(),
            anchor: Matrix2x9::zeros(),
            landmark: Matrix2x3::new(cam.fx, 0.0, 0.0, 0.0, cam.fy, 0.0),
        });
    }
    let rho = f.rho;
    let ri_t = x_i.nav.r.matrix().transpose();
    let ra = x_a.nav.r.matrix();
    let rbc = cam.r_bc.matrix();
    // d(pixel) / d(observing body point)
    let jb = cam.projection_jacobian(&c.f_c) * rbc.transpose();
    let jw = jb * ri_t;

    let mut observer = Matrix2x9::zeros();
    let mut anchor = Matrix2x9::zeros();
    let (obs_rot, anc_rot) = match f_form {
        ErrorFormulation::Traditional => (
            skew(&(c.f_w - x_i.nav.p * rho)),
            -skew(&(ra * c.f_ba)),
        ),
        ErrorFormulation::RightInvariant => (skew(&c.f_w), -skew(&c.f_w)),
    };
    observer.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jw * obs_rot));
    observer.fixed_view_mut::<2, 3>(0, 6).copy_from(&(-jw * rho));
    anchor.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jw * anc_rot));
    anchor.fixed_view_mut::<2, 3>(0, 6).copy_from(&(jw * rho));

    let to_cam = rbc.transpose() * ri_t * ra * rbc;
    let d_rho = rbc.transpose() * (ri_t * (ra * cam.t_bc + x_a.nav.p - x_i.nav.p) - cam.t_bc);
    let mut dfc = Matrix3::zeros();
    dfc.set_column(0, &to_cam.column(0));
    dfc.set_column(1, &to_cam.column(1));
    dfc.set_column(2, &d_rho);
    let landmark = cam.projection_jacobian(&c.f_c) * dfc;
    Ok(ReprojectionJacobians { observer, anchor, landmark })
}

/// Largest angle, in degrees, between world-frame viewing rays of the
/// given views, with the indices of the pair that attains it.
pub fn max_parallax(cam: &CameraModel, views: &[(SE23, Vector2<f64>)]) -> (f64, usize, usize) {
    let rays: Vec<Vector3<f64>> = views
        .iter()
        .map(|(pose, uv)| (cam.camera_in_world(pose).1 * cam.bearing(uv)).normalize())
        .collect();
    let mut best = (0.0, 0, 0);
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let angle = rays[i].cross(&rays[j]).norm().atan2(rays[i].dot(&rays[j])).to_degrees();
            if angle > best.0 {
                best = (angle, i, j);
            }
        }
    }
    best
}

/// Admit iff the widest pair of viewing rays is at least `gate_deg` apart.
pub fn disparity_gate(cam: &CameraModel, views: &[(SE23, Vector2<f64>)], gate_deg: f64) -> bool {
    views.len() >= 2 && max_parallax(cam, views).0 >= gate_deg
}

/// Landmark anchored at `anchor_pose` from its anchor pixel and one more
/// view. Depth comes from midpoint triangulation of the two rays.
pub fn initialize_landmark(
    cam: &CameraModel,
    anchor: usize,
    anchor_pose: &SE23,
    observer_pose: &SE23,
    uv_anchor: &Vector2<f64>,
    uv_observer: &Vector2<f64>,
    gate_deg: f64,
) -> Result<InverseDepthLandmark> {
    let views = [(*anchor_pose, *uv_anchor), (*observer_pose, *uv_observer)];
    let (angle, _, _) = max_parallax(cam, &views);
    if angle < gate_deg || angle == 0.0 {
        return Err(Error::LowDisparity { angle_deg: angle });
    }
    let b_a = cam.bearing(uv_anchor);
    let (c_a, r_a) = cam.camera_in_world(anchor_pose);
    let (c_o, r_o) = cam.camera_in_world(observer_pose);
    let d_a = r_a * b_a;
    let d_o = r_o * cam.bearing(uv_observer);
    // Closest points c_a + s d_a and c_o + t d_o.
    let w = c_a - c_o;
    let (a, b, c) = (d_a.dot(&d_a), d_a.dot(&d_o), d_o.dot(&d_o));
    let (d, e) = (d_a.dot(&w), d_o.dot(&w));
    let den = a * c - b * b;
    if den.abs() < 1e-15 {
        return Err(Error::LowDisparity { angle_deg: angle });
    }
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    let mid = 0.5 * ((c_a + d_a * s) + (c_o + d_o * t));
    // Depth along the anchor optical axis.
    let depth = (r_a.transpose() * (mid - c_a)).z;
    if !(depth > 0.0) {
        return Err(Error::LowDisparity { angle_deg: angle });
    }
    Ok(InverseDepthLandmark {
        alpha: b_a.x,
        beta: b_a.y,
        rho: (1.0 / depth).clamp(RHO_MIN, RHO_MAX),
        anchor,
    })
}

/// Inverse-depth coordinates of a world point in the camera of `anchor_pose`.
pub fn landmark_from_point(cam: &CameraModel, anchor: usize, anchor_pose: &SE23, point: &Vector3<f64>) -> InverseDepthLandmark {
    let (c, r) = cam.camera_in_world(anchor_pose);
    let pc = r.transpose() * (point - c);
    InverseDepthLandmark {
        alpha: pc.x / pc.z,
        beta: pc.y / pc.z,
        rho: 1.0 / pc.z,
        anchor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_exp;
    use crate::state::{gauge_transform, retract_vec, GaugeTransform, Vector15};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const BOTH: [ErrorFormulation; 2] = [ErrorFormulation::Traditional, ErrorFormulation::RightInvariant];

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn state(nav: SE23, stamp: f64) -> SystemState {
        SystemState::new(nav, Vector3::zeros(), Vector3::zeros(), stamp)
    }

    /// Anchor and observer a short hop apart, both seeing a point ahead.
    fn scene(rng: &mut ChaCha8Rng, cam: &CameraModel) -> (SystemState, SystemState, Vector3<f64>) {
        let a = SE23::new(so3_exp(&rv(rng, 1.0)), rv(rng, 2.0), rv(rng, 5.0));
        let i = SE23::new(so3_exp(&rv(rng, 0.1)) * a.r, rv(rng, 2.0), a.p + rv(rng, 0.5));
        let (c, r) = cam.camera_in_world(&a);
        let pc = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.6), rng.random_range(3.0..8.0));
        (state(i, 1.0), state(a, 0.0), c + r * pc)
    }

    #[test]
    fn same_frame_projection() {
        let cam = CameraModel::default();
        let x = state(SE23::new(so3_exp(&Vector3::new(0.3, 0.1, -0.2)), Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)), 0.0);
        let f = InverseDepthLandmark { alpha: 0.1, beta: -0.05, rho: 0.3, anchor: 0 };
        let uv = project(&cam, &x, &x, &f).unwrap();
        assert_eq!(uv, Vector2::new(cam.fx * 0.1 + cam.cx, cam.fy * -0.05 + cam.cy));

        let plain = CameraModel { r_bc: Rot3::identity(), t_bc: Vector3::zeros(), ..cam };
        let axis = InverseDepthLandmark { alpha: 0.0, beta: 0.0, rho: 0.2, anchor: 0 };
        assert_eq!(project(&plain, &x, &x, &axis).unwrap(), Vector2::new(plain.cx, plain.cy));
    }

    #[test]
    fn projection_matches_forward_geometry() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (xi, xa, point) = scene(&mut rng, &cam);
            let (c, r) = cam.camera_in_world(&xi.nav);
            let pc = r.transpose() * (point - c);
            if pc.z <= 0.1 {
                continue;
            }
            let f = landmark_from_point(&cam, 0, &xa.nav, &point);
            let uv = project(&cam, &xi, &xa, &f).unwrap();
            assert!((uv - cam.pixel(&pc)).norm() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = CameraModel::default();
        let xa = state(SE23::identity(), 0.0);
        let f = landmark_from_point(&cam, 0, &xa.nav, &Vector3::new(5.0, 0.0, 0.0));
        let xi = state(SE23::new(so3_exp(&Vector3::new(0.0, 0.0, std::f64::consts::PI - 0.1)), Vector3::zeros(), Vector3::zeros()), 1.0);
        assert!(matches!(project(&cam, &xi, &xa, &f), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn residual_cases() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (xi, xa, point) = scene(&mut rng, &cam);
        let f = landmark_from_point(&cam, 0, &xa.nav, &point);
        let uv = project(&cam, &xi, &xa, &f).unwrap();
        let z = Observation { frame: 1, landmark: 0, uv, sigma: 1.0 };
        assert_eq!(reprojection_residual(&cam, &xi, &xa, &f, &z).unwrap(), Vector2::zeros());
        let shifted = Observation { uv: uv + Vector2::new(1.0, 0.0), ..z };
        let r = reprojection_residual(&cam, &xi, &xa, &f, &shifted).unwrap();
        assert!((r - Vector2::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn whitened_residual_has_unit_variance() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xi, xa, point) = scene(&mut rng, &cam);
        let f = landmark_from_point(&cam, 0, &xa.nav, &point);
        let uv = project(&cam, &xi, &xa, &f).unwrap();
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let noise = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            let z = Observation { frame: 1, landmark: 0, uv: uv + noise, sigma: 1.0 };
            acc += (reprojection_residual(&cam, &xi, &xa, &f, &z).unwrap() / z.sigma).norm_squared();
        }
        let var = acc / (2.0 * n as f64);
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    fn fd_jacobians(
        form: ErrorFormulation,
        cam: &CameraModel,
        xi: &SystemState,
        xa: &SystemState,
        f: &InverseDepthLandmark,
    ) -> ReprojectionJacobians {
        let eps = 1e-6;
        let mut obs = Matrix2x9::zeros();
        let mut anc = Matrix2x9::zeros();
        let mut lm = Matrix2x3::zeros();
        for k in 0..9 {
            let mut d = Vector15::zeros();
            d[k] = eps;
            let p = project(cam, &retract_vec(form, xi, &d), xa, f).unwrap();
            let m = project(cam, &retract_vec(form, xi, &-d), xa, f).unwrap();
            obs.set_column(k, &((p - m) / (2.0 * eps)));
            let p = project(cam, xi, &retract_vec(form, xa, &d), f).unwrap();
            let m = project(cam, xi, &retract_vec(form, xa, &-d), f).unwrap();
            anc.set_column(k, &((p - m) / (2.0 * eps)));
        }
        for k in 0..3 {
            let mut fp = *f;
            let mut fm = *f;
            match k {
                0 => {
                    fp.alpha += eps;
                    fm.alpha -= eps
                }
                1 => {
                    fp.beta += eps;
                    fm.beta -= eps
                }
                _ => {
                    fp.rho += eps;
                    fm.rho -= eps
                }
            }
            let p = project(cam, xi, xa, &fp).unwrap();
            let m = project(cam, xi, xa, &fm).unwrap();
            lm.set_column(k, &((p - m) / (2.0 * eps)));
        }
        ReprojectionJacobians { observer: obs, anchor: anc, landmark: lm }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 100 {
            let (xi, xa, point) = scene(&mut rng, &cam);
            let f = landmark_from_point(&cam, 0, &xa.nav, &point);
            if project(&cam, &xi, &xa, &f).is_err() {
                continue;
            }
            checked += 1;
            for form in BOTH {
                let j = reprojection_jacobians(form, &cam, &xi, &xa, &f).unwrap();
                let fd = fd_jacobians(form, &cam, &xi, &xa, &f);
                assert!((j.observer - fd.observer).norm() <= 1e-5 * j.observer.norm().max(1.0));
                assert!((j.anchor - fd.anchor).norm() <= 1e-5 * j.anchor.norm().max(1.0));
                assert!((j.landmark - fd.landmark).norm() <= 1e-5 * j.landmark.norm().max(1.0));
                assert_eq!(j.observer.fixed_view::<2, 3>(0, 3).into_owned(), Matrix2x3::zeros());
                assert_eq!(j.anchor.fixed_view::<2, 3>(0, 3).into_owned(), Matrix2x3::zeros());
            }
        }
    }

    #[test]
    fn anchor_frame_jacobians_vanish() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, xa, point) = scene(&mut rng, &cam);
        let f = landmark_from_point(&cam, 0, &xa.nav, &point);
        for form in BOTH {
            let j = reprojection_jacobians(form, &cam, &xa, &xa, &f).unwrap();
            assert_eq!(j.observer, Matrix2x9::zeros());
            assert_eq!(j.anchor, Matrix2x9::zeros());
            let fd = fd_jacobians(form, &cam, &xa, &xa, &f);
            assert!((j.landmark - fd.landmark).norm() < 1e-6);
        }
    }

    #[test]
    fn formulations_differ_by_observer_position_term() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (xi, xa, point) = scene(&mut rng, &cam);
            let f = landmark_from_point(&cam, 0, &xa.nav, &point);
            let Ok(c) = chain(&cam, &xi, &xa, &f) else { continue };
            let t = reprojection_jacobians(ErrorFormulation::Traditional, &cam, &xi, &xa, &f).unwrap();
            let r = reprojection_jacobians(ErrorFormulation::RightInvariant, &cam, &xi, &xa, &f).unwrap();
            let jh = cam.projection_jacobian(&c.f_c) * cam.r_bc.matrix().transpose();
            let expected = jh * xi.nav.r.matrix().transpose() * skew(&(xi.nav.p * f.rho));
            let diff = r.observer.fixed_view::<2, 3>(0, 0) - t.observer.fixed_view::<2, 3>(0, 0);
            assert!((diff - expected).norm() < 1e-9 * expected.norm().max(1.0));
        }
    }

    #[test]
    fn residual_is_gauge_invariant() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (xi, xa, point) = scene(&mut rng, &cam);
            let f = landmark_from_point(&cam, 0, &xa.nav, &point);
            let Ok(uv) = project(&cam, &xi, &xa, &f) else { continue };
            let g = GaugeTransform { dphi: rng.random_range(-3.0..3.0), dt: rv(&mut rng, 10.0) };
            let moved = project(&cam, &gauge_transform(&g, &xi), &gauge_transform(&g, &xa), &f).unwrap();
            assert!((moved - uv).norm() < 1e-9);
        }
    }

    #[test]
    fn two_view_initialization() {
        let cam = CameraModel { r_bc: Rot3::identity(), t_bc: Vector3::zeros(), ..CameraModel::default() };
        let a = SE23::identity();
        let o = SE23::new(Rot3::identity(), Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let point = Vector3::new(0.0, 0.0, 5.0);
        let uv_a = cam.pixel(&point);
        let uv_o = cam.pixel(&(point - o.p));
        let f = initialize_landmark(&cam, 0, &a, &o, &uv_a, &uv_o, 1.0).unwrap();
        assert!((f.rho - 0.2).abs() < 1e-6);
        assert!(f.alpha.abs() < 1e-15 && f.beta.abs() < 1e-15);

        assert!(matches!(
            initialize_landmark(&cam, 0, &a, &a, &uv_a, &uv_a, 1.0),
            Err(Error::LowDisparity { .. })
        ));
    }

    #[test]
    fn initialization_recovers_true_inverse_depth() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 200 {
            let (xi, xa, point) = scene(&mut rng, &cam);
            let truth = landmark_from_point(&cam, 0, &xa.nav, &point);
            let Ok(uv_i) = project(&cam, &xi, &xa, &truth) else { continue };
            let uv_a = project(&cam, &xa, &xa, &truth).unwrap();
            let Ok(f) = initialize_landmark(&cam, 0, &xa.nav, &xi.nav, &uv_a, &uv_i, 1.0) else { continue };
            checked += 1;
            assert!((f.rho - truth.rho).abs() < 1e-9 * truth.rho.max(1.0), "{} vs {}", f.rho, truth.rho);
            assert!((f.alpha - truth.alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_decisions() {
        let cam = CameraModel::default();
        let point = Vector3::new(5.0, 0.3, 0.2);
        let pose = |r: Rot3, p: Vector3<f64>| SE23::new(r, Vector3::zeros(), p);
        let view = |x: &SE23| {
            let (c, r) = cam.camera_in_world(x);
            (*x, cam.pixel(&(r.transpose() * (point - c))))
        };
        // Rotating about the camera centre: the rays still meet at the same point.
        let base = pose(Rot3::identity(), -(cam.t_bc));
        let spun = {
            let r = so3_exp(&Vector3::new(0.0, 0.0, 0.05));
            pose(r, -(r * cam.t_bc))
        };
        assert!(!disparity_gate(&cam, &[view(&base), view(&spun)], 1.0));
        assert!(!disparity_gate(&cam, &[view(&base)], 1.0));

        // 0.5 s at 2.3 m/s sideways to a point 5 m away.
        let moved = pose(Rot3::identity(), Vector3::new(0.0, 1.15, 0.0) - cam.t_bc);
        assert!(disparity_gate(&cam, &[view(&base), view(&moved)], 1.0));
    }
}
