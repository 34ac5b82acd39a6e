//! Fixed-lag smoother over a sliding time window.
//!
//! States are dense 15-dim blocks; landmarks are eliminated by a Schur
//! complement before each solve. Old states, and landmarks anchored to
//! them, are marginalized into a square-root prior with frozen Jacobians.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{
    self, imu_residual, imu_residual_jacobians, inverse_sqrt, nav_transition, process_noise_weight_regularized,
    ImuNoiseConfig, ImuSample, JacobianMode,
};
use crate::lie::SE23;
use crate::linear::{schur_complement, square_root_form, FactorId, LinearFactor, NormalEquations};
use crate::observability::{JacobianTrace, StateSnapshot, TraceRow, Variable};
use crate::state::{error_vec, retract_vec, ErrorFormulation, InverseDepthLandmark, Matrix15, SystemState, Vector15, STATE_DIM};
use crate::vision::{
    disparity_gate, initialize_landmark, max_parallax, project, reprojection_jacobians, CameraModel, Observation, RHO_MAX,
    RHO_MIN,
};

const STAMP_EPS: f64 = 1e-9;
const LAMBDA_MIN: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e12;
const MAX_ESCALATIONS: usize = 10;
/// Diagonal floor used when extracting covariances.
pub const COV_FLOOR: f64 = 1e-8;
/// Eigenvalues of the marginal information below this fraction of the
/// largest are dropped from the square-root prior.
const PRIOR_EIG_TOL: f64 = 1e-12;

/// Standard deviations of the optional prior on the first state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPrior {
    pub sigma_theta: f64,
    pub sigma_v: f64,
    pub sigma_p: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
}

impl Default for InitialPrior {
    fn default() -> Self {
        InitialPrior { sigma_theta: 1e-4, sigma_v: 0.05, sigma_p: 1e-3, sigma_bg: 2e-3, sigma_ba: 2e-2 }
    }
}

impl InitialPrior {
    fn sqrt_information(&self) -> Matrix15 {
        let mut d = Vector15::zeros();
        for k in 0..3 {
            d[k] = 1.0 / self.sigma_theta;
            d[3 + k] = 1.0 / self.sigma_v;
            d[6 + k] = 1.0 / self.sigma_p;
            d[9 + k] = 1.0 / self.sigma_bg;
            d[12 + k] = 1.0 / self.sigma_ba;
        }
        Matrix15::from_diagonal(&d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherConfig {
    pub horizon: f64,
    pub formulation: ErrorFormulation,
    pub imu_jac_mode: JacobianMode,
    pub fej: bool,
    pub max_outer_iters: usize,
    pub lm_lambda_init: f64,
    pub convergence_tol: f64,
    /// Minimum parallax, in degrees, before a track becomes a landmark.
    pub disparity_gate_deg: f64,
    pub initial_prior: Option<InitialPrior>,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            horizon: 1.0,
            formulation: ErrorFormulation::RightInvariant,
            imu_jac_mode: JacobianMode::IdentityApprox,
            fej: false,
            max_outer_iters: 10,
            lm_lambda_init: 1e-4,
            convergence_tol: 1e-6,
            disparity_gate_deg: 1.0,
            initial_prior: None,
        }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if self.max_outer_iters == 0 {
            return bad("max_outer_iters must be at least 1");
        }
        if !(self.lm_lambda_init > 0.0) || !(self.convergence_tol > 0.0) {
            return bad("lm_lambda_init and convergence_tol must be positive");
        }
        if !(self.disparity_gate_deg >= 0.0) {
            return bad("disparity_gate_deg must be nonnegative");
        }
        if let Some(p) = &self.initial_prior {
            let s = [p.sigma_theta, p.sigma_v, p.sigma_p, p.sigma_bg, p.sigma_ba];
            if s.iter().any(|v| !(*v > 0.0)) {
                return bad("initial prior sigmas must be positive");
            }
        }
        Ok(())
    }
}

/// Permanently linearized prior left behind by marginalization. Its
/// residual is `residual0 + jacobian * error(x, lin_points)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalPrior {
    pub frames: Vec<usize>,
    pub jacobian: DMatrix<f64>,
    pub residual0: DVector<f64>,
    pub lin_points: Vec<SystemState>,
    pub event: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub frame: usize,
    pub stamp: f64,
    pub estimate: SystemState,
    pub nav_cov: Matrix15,
    pub lm_count: usize,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    pub marginalizations: usize,
}

/// One line of the exported session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub frame: usize,
    pub stamp: f64,
    pub estimate: SystemState,
    pub cov_diag: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub marginalizations: usize,
}

impl From<&StepOutput> for SessionRecord {
    fn from(s: &StepOutput) -> Self {
        SessionRecord {
            frame: s.frame,
            stamp: s.stamp,
            estimate: s.estimate,
            cov_diag: s.nav_cov.diagonal().iter().copied().collect(),
            cost: s.cost_history.last().copied().unwrap_or(0.0),
            iterations: s.iterations,
            marginalizations: s.marginalizations,
        }
    }
}

#[derive(Clone, Debug)]
struct StateNode {
    frame: usize,
    x: SystemState,
    first_estimate: Option<SystemState>,
}

#[derive(Clone, Debug)]
struct LandmarkNode {
    f: InverseDepthLandmark,
    track: usize,
}

#[derive(Clone, Debug)]
struct ImuFactor {
    from: usize,
    to: usize,
    knots: Vec<ImuSample>,
}

#[derive(Clone, Debug)]
struct ProjectionFactor {
    frame: usize,
    landmark: usize,
    obs: Observation,
}

#[derive(Clone, Debug)]
struct InitialFactor {
    frame: usize,
    mean: SystemState,
    sqrt_info: Matrix15,
}

/// Which nonlinear factors a linearization covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scope {
    All,
    /// Only factors touching states older than this frame id, or
    /// landmarks anchored there.
    Older(usize),
}

struct Linearization {
    factors: Vec<LinearFactor>,
    /// IMU whiteners, keyed by the factor's end frame.
    imu_whiteners: HashMap<usize, Matrix15>,
    /// Projection factors (indices into `projections`) that were evaluable.
    active_projections: Vec<usize>,
    landmark_order: Vec<usize>,
    dropped: usize,
}

/// A fixed-lag smoother instance. Single-threaded; clone to branch.
#[derive(Clone, Debug)]
pub struct Smoother {
    config: SmootherConfig,
    camera: CameraModel,
    noise: ImuNoiseConfig,
    init: SystemState,
    states: Vec<StateNode>,
    landmarks: BTreeMap<usize, LandmarkNode>,
    imu_factors: Vec<ImuFactor>,
    projections: Vec<ProjectionFactor>,
    prior: Option<MarginalPrior>,
    initial: Option<InitialFactor>,
    pending: BTreeMap<usize, Vec<Observation>>,
    track_to_landmark: HashMap<usize, usize>,
    next_frame: usize,
    next_landmark: usize,
    lambda: f64,
    marginalizations: usize,
    prev_norm_cost: f64,
    behind_camera_drops: usize,
}

impl Smoother {
    /// `init` is the estimate of the first frame; its stamp must match the
    /// first call to [`Smoother::add_frame`].
    pub fn new(config: SmootherConfig, camera: CameraModel, noise: ImuNoiseConfig, init: SystemState) -> Result<Self> {
        config.validate()?;
        camera.validate()?;
        noise.validate()?;
        Ok(Smoother {
            lambda: config.lm_lambda_init,
            config,
            camera,
            noise,
            init,
            states: Vec::new(),
            landmarks: BTreeMap::new(),
            imu_factors: Vec::new(),
            projections: Vec::new(),
            prior: None,
            initial: None,
            pending: BTreeMap::new(),
            track_to_landmark: HashMap::new(),
            next_frame: 0,
            next_landmark: 0,
            marginalizations: 0,
            prev_norm_cost: 0.0,
            behind_camera_drops: 0,
        })
    }

    pub fn config(&self) -> &SmootherConfig {
        &self.config
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn num_imu_factors(&self) -> usize {
        self.imu_factors.len()
    }

    pub fn num_projection_factors(&self) -> usize {
        self.projections.len()
    }

    pub fn num_pending_observations(&self) -> usize {
        self.pending.values().map(|v| v.len()).sum()
    }

    pub fn marginalizations(&self) -> usize {
        self.marginalizations
    }

    pub fn behind_camera_drops(&self) -> usize {
        self.behind_camera_drops
    }

    pub fn prior(&self) -> Option<&MarginalPrior> {
        self.prior.as_ref()
    }

    pub fn latest(&self) -> Option<&SystemState> {
        self.states.last().map(|s| &s.x)
    }

    /// `(frame id, estimate)` of every state in the window, oldest first.
    pub fn states(&self) -> Vec<(usize, SystemState)> {
        self.states.iter().map(|s| (s.frame, s.x)).collect()
    }

    /// `(key, landmark, track id)` of every landmark in the window.
    pub fn landmarks(&self) -> Vec<(usize, InverseDepthLandmark, usize)> {
        self.landmarks.iter().map(|(k, l)| (*k, l.f, l.track)).collect()
    }

    pub fn set_state(&mut self, frame: usize, x: SystemState) {
        if let Some(s) = self.states.iter_mut().find(|s| s.frame == frame) {
            s.x = SystemState { stamp: s.x.stamp, ..x };
        }
    }

    pub fn set_landmark(&mut self, key: usize, f: InverseDepthLandmark) {
        if let Some(l) = self.landmarks.get_mut(&key) {
            l.f = InverseDepthLandmark { anchor: l.f.anchor, ..f };
        }
    }

    fn slot(&self, frame: usize) -> usize {
        frame - self.states[0].frame
    }

    fn node(&self, frame: usize) -> &StateNode {
        &self.states[self.slot(frame)]
    }

    /// Point at which Jacobians involving `frame` are evaluated.
    fn eval_point<'a>(&self, states: &'a [StateNode], frame: usize) -> &'a SystemState {
        let n = &states[frame - states[0].frame];
        match (&n.first_estimate, self.config.fej) {
            (Some(fe), true) => fe,
            _ => &n.x,
        }
    }

    /// Adds a frame: a propagated state, an IMU factor to the previous
    /// state and the frame's observations. `observations[k].landmark` is a
    /// track id. `imu` must cover the interval since the previous frame.
    pub fn add_frame(&mut self, stamp: f64, imu: &[ImuSample], observations: &[Observation]) -> Result<usize> {
        let frame = self.next_frame;
        if let Some(last) = self.states.last() {
            if !(stamp > last.x.stamp + STAMP_EPS) {
                return Err(Error::NonMonotoneStamp { stamp, latest: last.x.stamp });
            }
            let knots = imu::knots(imu, last.x.stamp, stamp)?;
            let x = imu::integrate(&last.x, &knots, stamp)?;
            self.imu_factors.push(ImuFactor { from: last.frame, to: frame, knots });
            self.states.push(StateNode { frame, x, first_estimate: None });
        } else {
            if (stamp - self.init.stamp).abs() > STAMP_EPS {
                return Err(Error::NonMonotoneStamp { stamp, latest: self.init.stamp });
            }
            let x = SystemState { stamp, ..self.init };
            self.states.push(StateNode { frame, x, first_estimate: None });
            if let Some(p) = &self.config.initial_prior {
                self.initial = Some(InitialFactor { frame, mean: x, sqrt_info: p.sqrt_information() });
            }
        }
        self.next_frame += 1;

        let mut touched = Vec::new();
        for o in observations {
            let obs = Observation { frame, ..*o };
            match self.track_to_landmark.get(&o.landmark) {
                Some(&key) => self.projections.push(ProjectionFactor { frame, landmark: key, obs }),
                None => {
                    self.pending.entry(o.landmark).or_default().push(obs);
                    touched.push(o.landmark);
                }
            }
        }
        for track in touched {
            self.try_admit(track);
        }
        Ok(frame)
    }

    fn try_admit(&mut self, track: usize) {
        let Some(obs) = self.pending.get(&track) else { return };
        if obs.len() < 2 {
            return;
        }
        let views: Vec<(SE23, _)> = obs.iter().map(|o| (self.node(o.frame).x.nav, o.uv)).collect();
        if !disparity_gate(&self.camera, &views, self.config.disparity_gate_deg) {
            return;
        }
        // Anchor at the oldest observation; triangulate against the view
        // with the widest baseline to it.
        let anchor = obs[0];
        let best = (1..obs.len())
            .max_by(|&a, &b| {
                let pa = max_parallax(&self.camera, &[views[0], views[a]]).0;
                let pb = max_parallax(&self.camera, &[views[0], views[b]]).0;
                pa.total_cmp(&pb)
            })
            .unwrap_or(1);
        let anchor_state = self.node(anchor.frame).x;
        let Ok(f) = initialize_landmark(
            &self.camera,
            anchor.frame,
            &anchor_state.nav,
            &self.node(obs[best].frame).x.nav,
            &anchor.uv,
            &obs[best].uv,
            0.0,
        ) else {
            return;
        };
        let obs = self.pending.remove(&track).unwrap_or_default();
        let key = self.next_landmark;
        self.next_landmark += 1;
        self.landmarks.insert(key, LandmarkNode { f, track });
        self.track_to_landmark.insert(track, key);
        for o in obs {
            if project(&self.camera, &self.node(o.frame).x, &anchor_state, &f).is_ok() {
                self.projections.push(ProjectionFactor { frame: o.frame, landmark: key, obs: o });
            }
        }
    }

    fn in_scope(&self, scope: Scope, frames: &[usize]) -> bool {
        match scope {
            Scope::All => true,
            Scope::Older(cut) => frames.iter().any(|&f| f < cut),
        }
    }

    /// Whitened linearization of the factors in `scope`. Residuals are
    /// evaluated at the current estimates; Jacobians at `eval_point`.
    fn linearize(&self, scope: Scope) -> Result<Linearization> {
        let f = self.config.formulation;
        let states = &self.states;
        let mut factors = Vec::new();
        let mut imu_whiteners = HashMap::new();

        if let Some(init) = &self.initial {
            if self.in_scope(scope, &[init.frame]) {
                let x = &self.node(init.frame).x;
                let r = init.sqrt_info * error_vec(f, x, &init.mean)?;
                factors.push(LinearFactor::Dense {
                    id: FactorId::Initial(init.frame),
                    blocks: vec![(self.slot(init.frame), DMatrix::from_column_slice(15, 15, init.sqrt_info.as_slice()))],
                    r: DVector::from_column_slice(r.as_slice()),
                });
            }
        }

        if let Some(prior) = &self.prior {
            // The prior is always folded into the next one.
            factors.push(self.prior_factor(prior)?);
        }

        for fac in &self.imu_factors {
            if !self.in_scope(scope, &[fac.from, fac.to]) {
                continue;
            }
            let (lf, w) = self.imu_linear(fac)?;
            imu_whiteners.insert(fac.to, w);
            factors.push(lf);
        }

        let mut landmark_order = Vec::new();
        let mut landmark_slots = HashMap::new();
        for (key, lm) in &self.landmarks {
            if let Scope::Older(cut) = scope {
                if lm.f.anchor >= cut {
                    continue;
                }
            }
            landmark_slots.insert(*key, landmark_order.len());
            landmark_order.push(*key);
        }

        let mut active_projections = Vec::new();
        let mut dropped = 0;
        for (k, p) in self.projections.iter().enumerate() {
            let Some(&lslot) = landmark_slots.get(&p.landmark) else {
                if self.in_scope(scope, &[p.frame]) {
                    // Observation at a removed frame of a landmark whose
                    // anchor stays; cannot happen when anchors are the
                    // oldest observation.
                    dropped += 1;
                }
                continue;
            };
            let lm = &self.landmarks[&p.landmark];
            let x_i = &self.node(p.frame).x;
            let x_a = &self.node(lm.f.anchor).x;
            let r = match project(&self.camera, x_i, x_a, &lm.f) {
                Ok(h) => (h - p.obs.uv) / p.obs.sigma,
                Err(_) => {
                    dropped += 1;
                    continue;
                }
            };
            let e_i = self.eval_point(states, p.frame);
            let e_a = self.eval_point(states, lm.f.anchor);
            let jac = match reprojection_jacobians(f, &self.camera, e_i, e_a, &lm.f) {
                Ok(j) => j,
                Err(_) => {
                    dropped += 1;
                    continue;
                }
            };
            let s = 1.0 / p.obs.sigma;
            factors.push(LinearFactor::Projection {
                id: FactorId::Projection { frame: p.frame, landmark: p.landmark },
                observer: self.slot(p.frame),
                anchor: self.slot(lm.f.anchor),
                landmark: lslot,
                j_obs: jac.observer * s,
                j_anc: jac.anchor * s,
                j_lm: jac.landmark * s,
                r,
            });
            active_projections.push(k);
        }
        Ok(Linearization { factors, imu_whiteners, active_projections, landmark_order, dropped })
    }

    fn prior_factor(&self, prior: &MarginalPrior) -> Result<LinearFactor> {
        let f = self.config.formulation;
        let mut eta = DVector::zeros(STATE_DIM * prior.frames.len());
        let mut blocks = Vec::new();
        for (k, (&frame, lin)) in prior.frames.iter().zip(&prior.lin_points).enumerate() {
            let e = error_vec(f, &self.node(frame).x, lin)?;
            eta.fixed_rows_mut::<15>(STATE_DIM * k).copy_from(&e);
            let cols = prior.jacobian.columns(STATE_DIM * k, STATE_DIM).into_owned();
            blocks.push((self.slot(frame), cols));
        }
        Ok(LinearFactor::Dense { id: FactorId::Prior(prior.event), blocks, r: &prior.residual0 + &prior.jacobian * eta })
    }

    fn imu_linear(&self, fac: &ImuFactor) -> Result<(LinearFactor, Matrix15)> {
        let f = self.config.formulation;
        let x0 = &self.node(fac.from).x;
        let x1 = &self.node(fac.to).x;
        let prop = imu::propagate(x0, &fac.knots, x1.stamp, &self.noise, f)?;
        let r = imu_residual(f, x1, &prop.state)?.to_vector();
        let (a_i, a_pred) = imu_residual_jacobians(f, self.config.imu_jac_mode, x1, &prop.state)?;
        let mut phi = prop.phi;
        // The nav block only depends on the endpoints; evaluate it at the
        // states' own linearization points.
        let e0 = self.eval_point(&self.states, fac.from);
        let e1 = self.eval_point(&self.states, fac.to);
        phi.fixed_view_mut::<9, 9>(0, 0)
            .copy_from(&nav_transition(f, &e0.nav, &e1.nav, x1.stamp - x0.stamp));
        let (cov, _) = process_noise_weight_regularized(&prop, &a_pred);
        let w = inverse_sqrt(&cov);
        let j0 = w * a_pred * phi;
        let j1 = w * a_i;
        let r = w * r;
        Ok((
            LinearFactor::Dense {
                id: FactorId::Imu(fac.to),
                blocks: vec![
                    (self.slot(fac.from), DMatrix::from_column_slice(15, 15, j0.as_slice())),
                    (self.slot(fac.to), DMatrix::from_column_slice(15, 15, j1.as_slice())),
                ],
                r: DVector::from_column_slice(r.as_slice()),
            },
            w,
        ))
    }

    /// Nonlinear cost of the linearized factor set at candidate values.
    fn cost_at(
        &self,
        lin: &Linearization,
        states: &[StateNode],
        landmarks: &BTreeMap<usize, LandmarkNode>,
    ) -> Result<f64> {
        let f = self.config.formulation;
        let at = |frame: usize| &states[frame - states[0].frame].x;
        let mut cost = 0.0;
        if let Some(init) = &self.initial {
            cost += (init.sqrt_info * error_vec(f, at(init.frame), &init.mean)?).norm_squared();
        }
        if let Some(prior) = &self.prior {
            let mut eta = DVector::zeros(STATE_DIM * prior.frames.len());
            for (k, (&frame, l)) in prior.frames.iter().zip(&prior.lin_points).enumerate() {
                eta.fixed_rows_mut::<15>(STATE_DIM * k).copy_from(&error_vec(f, at(frame), l)?);
            }
            cost += (&prior.residual0 + &prior.jacobian * eta).norm_squared();
        }
        for fac in &self.imu_factors {
            let w = &lin.imu_whiteners[&fac.to];
            let pred = imu::integrate(at(fac.from), &fac.knots, at(fac.to).stamp)?;
            cost += (w * imu_residual(f, at(fac.to), &pred)?.to_vector()).norm_squared();
        }
        for &k in &lin.active_projections {
            let p = &self.projections[k];
            let lm = &landmarks[&p.landmark];
            match project(&self.camera, at(p.frame), at(lm.f.anchor), &lm.f) {
                Ok(h) => cost += ((h - p.obs.uv) / p.obs.sigma).norm_squared(),
                Err(_) => return Ok(f64::INFINITY),
            }
        }
        Ok(cost)
    }

    fn apply_step(
        &self,
        lin: &Linearization,
        dx: &DVector<f64>,
        dl: &[Vector3<f64>],
    ) -> (Vec<StateNode>, BTreeMap<usize, LandmarkNode>) {
        let f = self.config.formulation;
        let states = self
            .states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let d: Vector15 = dx.fixed_rows::<15>(STATE_DIM * k).into_owned();
                StateNode { x: retract_vec(f, &s.x, &d), ..s.clone() }
            })
            .collect();
        let mut landmarks = self.landmarks.clone();
        for (slot, key) in lin.landmark_order.iter().enumerate() {
            let l = landmarks.get_mut(key).expect("landmark in order");
            let d = dl[slot];
            l.f.alpha += d.x;
            l.f.beta += d.y;
            l.f.rho = (l.f.rho + d.z).clamp(RHO_MIN, RHO_MAX);
        }
        (states, landmarks)
    }

    /// Damped Gauss-Newton iterations on the current window followed by
    /// covariance extraction for the latest state.
    pub fn solve_and_update(&mut self) -> Result<StepOutput> {
        let mut cost_history = Vec::new();
        let mut iterations = 0;
        let mut rows = 0;
        for _ in 0..self.config.max_outer_iters {
            let lin = self.linearize(Scope::All)?;
            self.behind_camera_drops += lin.dropped;
            rows = lin.factors.iter().map(|f| f.rows()).sum();
            let ne = NormalEquations::assemble(&lin.factors, self.states.len(), lin.landmark_order.len());
            if cost_history.is_empty() {
                cost_history.push(ne.cost);
            }
            iterations += 1;
            let mut escalations = 0;
            let mut step_norm = 0.0;
            loop {
                let (dx, dl) = match ne.solve(self.lambda) {
                    Ok(s) => s,
                    Err(_) => {
                        escalations += 1;
                        self.lambda = (self.lambda * 10.0).min(LAMBDA_MAX);
                        if escalations > MAX_ESCALATIONS {
                            return Err(Error::IndefiniteNormalEquations { escalations });
                        }
                        continue;
                    }
                };
                let norm = dx.amax().max(dl.iter().map(|d| d.amax()).fold(0.0, f64::max));
                let (states, landmarks) = self.apply_step(&lin, &dx, &dl);
                if norm < self.config.convergence_tol {
                    self.states = states;
                    self.landmarks = landmarks;
                    break;
                }
                let cost = self.cost_at(&lin, &states, &landmarks)?;
                if cost.is_finite() && cost <= ne.cost {
                    self.states = states;
                    self.landmarks = landmarks;
                    self.lambda = (self.lambda / 10.0).max(LAMBDA_MIN);
                    cost_history.push(cost);
                    step_norm = norm;
                    break;
                }
                escalations += 1;
                self.lambda = (self.lambda * 10.0).min(LAMBDA_MAX);
                if escalations > MAX_ESCALATIONS {
                    break;
                }
            }
            if step_norm < self.config.convergence_tol {
                break;
            }
        }

        let final_cost = *cost_history.last().unwrap_or(&0.0);
        let norm_cost = final_cost / rows.max(1) as f64;
        if !norm_cost.is_finite() || norm_cost > 10.0 * self.prev_norm_cost.max(1.0) {
            return Err(Error::DivergedStep { cost: norm_cost, previous: self.prev_norm_cost });
        }
        self.prev_norm_cost = norm_cost;

        let nav_cov = self.latest_covariance()?;
        let last = self.states.last().expect("nonempty window");
        Ok(StepOutput {
            frame: last.frame,
            stamp: last.x.stamp,
            estimate: last.x,
            nav_cov,
            lm_count: self.landmarks.len(),
            iterations,
            cost_history,
            marginalizations: self.marginalizations,
        })
    }

    /// Reduced information matrix of all window states (landmarks
    /// eliminated) at the current estimates, undamped.
    pub fn state_information(&self) -> Result<DMatrix<f64>> {
        let lin = self.linearize(Scope::All)?;
        let ne = NormalEquations::assemble(&lin.factors, self.states.len(), lin.landmark_order.len());
        let (h, _) = match ne.reduce(0.0) {
            Ok(v) => v,
            Err(_) => ne.reduce(COV_FLOOR)?,
        };
        Ok(h)
    }

    /// Covariance of the latest state from the floored information matrix.
    pub fn latest_covariance(&self) -> Result<Matrix15> {
        let lin = self.linearize(Scope::All)?;
        let ne = NormalEquations::assemble(&lin.factors, self.states.len(), lin.landmark_order.len());
        let (h, _) = ne.reduce(COV_FLOOR)?;
        let n = h.nrows();
        let mut e = DMatrix::zeros(n, STATE_DIM);
        for k in 0..STATE_DIM {
            e[(n - STATE_DIM + k, k)] = 1.0;
        }
        let cols = match h.clone().cholesky() {
            Some(c) => c.solve(&e),
            None => crate::linear::regularized_inverse(&h, COV_FLOOR) * e,
        };
        let block: Matrix15 = cols.rows(n - STATE_DIM, STATE_DIM).fixed_view::<15, 15>(0, 0).into_owned();
        Ok(0.5 * (block + block.transpose()))
    }

    /// Whether the window is longer than the horizon.
    pub fn needs_marginalization(&self) -> bool {
        match (self.states.first(), self.states.last()) {
            (Some(a), Some(b)) => a.x.stamp < b.x.stamp - self.config.horizon - STAMP_EPS,
            _ => false,
        }
    }

    /// Removes every state strictly older than `latest - horizon`, together
    /// with landmarks anchored to them, folding their factors into a new
    /// square-root prior on the boundary states.
    pub fn marginalize(&mut self) -> Result<usize> {
        let latest = self.states.last().map(|s| s.x.stamp).unwrap_or(0.0);
        let t_m = latest - self.config.horizon;
        let k = self.states.iter().take_while(|s| s.x.stamp < t_m - STAMP_EPS).count();
        if k == 0 {
            return Err(Error::NothingToMarginalize { t_m });
        }
        let cut = self.states[k].frame;

        // Boundary states get their first estimates now, before any of
        // their factors are linearized for the prior.
        if self.config.fej {
            let boundary = self.boundary_frames(cut);
            for frame in boundary {
                let slot = self.slot(frame);
                let node = &mut self.states[slot];
                if node.first_estimate.is_none() {
                    node.first_estimate = Some(node.x);
                }
            }
            // Removed states that never reached the boundary are frozen at
            // their current value for consistency of this elimination.
            for node in &mut self.states[..k] {
                if node.first_estimate.is_none() {
                    node.first_estimate = Some(node.x);
                }
            }
        }

        let lin = self.linearize(Scope::Older(cut))?;
        let ns = self.states.len();
        let ne = NormalEquations::assemble(&lin.factors, ns, lin.landmark_order.len());
        let (h, g) = match ne.reduce(0.0) {
            Ok(v) => v,
            Err(_) => ne.reduce(COV_FLOOR)?,
        };
        let (s, gs) = schur_complement(&h, &g, STATE_DIM * k);

        // Restrict to retained states that actually received information.
        let retained: Vec<usize> = (k..ns)
            .filter(|&slot| {
                let o = STATE_DIM * (slot - k);
                s.view((o, 0), (STATE_DIM, s.ncols())).amax() > 0.0
            })
            .collect();
        let m = retained.len();
        let mut s_sub = DMatrix::zeros(STATE_DIM * m, STATE_DIM * m);
        let mut g_sub = DVector::zeros(STATE_DIM * m);
        for (a, &sa) in retained.iter().enumerate() {
            let oa = STATE_DIM * (sa - k);
            g_sub.rows_mut(STATE_DIM * a, STATE_DIM).copy_from(&gs.rows(oa, STATE_DIM));
            for (b, &sb) in retained.iter().enumerate() {
                let ob = STATE_DIM * (sb - k);
                s_sub
                    .view_mut((STATE_DIM * a, STATE_DIM * b), (STATE_DIM, STATE_DIM))
                    .copy_from(&s.view((oa, ob), (STATE_DIM, STATE_DIM)));
            }
        }
        let (jacobian, residual0) = square_root_form(&s_sub, &g_sub, PRIOR_EIG_TOL);
        let frames: Vec<usize> = retained.iter().map(|&slot| self.states[slot].frame).collect();
        let lin_points: Vec<SystemState> = retained.iter().map(|&slot| self.states[slot].x).collect();

        // Drop everything that was folded in.
        let removed_landmarks: Vec<usize> = lin.landmark_order.clone();
        for key in &removed_landmarks {
            if let Some(l) = self.landmarks.remove(key) {
                self.track_to_landmark.remove(&l.track);
            }
        }
        self.projections
            .retain(|p| p.frame >= cut && !removed_landmarks.contains(&p.landmark));
        self.imu_factors.retain(|fac| fac.from >= cut);
        if self.initial.as_ref().is_some_and(|i| i.frame < cut) {
            self.initial = None;
        }
        for obs in self.pending.values_mut() {
            obs.retain(|o| o.frame >= cut);
        }
        self.pending.retain(|_, v| !v.is_empty());
        self.states.drain(..k);

        self.marginalizations += 1;
        self.prior = Some(MarginalPrior { frames, jacobian, residual0, lin_points, event: self.marginalizations });
        Ok(k)
    }

    /// Retained frames sharing a factor with states older than `cut`.
    fn boundary_frames(&self, cut: usize) -> Vec<usize> {
        let mut out = std::collections::BTreeSet::new();
        if let Some(p) = &self.prior {
            out.extend(p.frames.iter().copied().filter(|&f| f >= cut));
        }
        for fac in &self.imu_factors {
            if fac.from < cut && fac.to >= cut {
                out.insert(fac.to);
            }
        }
        for p in &self.projections {
            if let Some(lm) = self.landmarks.get(&p.landmark) {
                if lm.f.anchor < cut && p.frame >= cut {
                    out.insert(p.frame);
                }
            }
        }
        out.into_iter().collect()
    }

    /// The whitened Jacobian of the current window at the current
    /// estimates, with prior rows marked frozen.
    pub fn jacobian_trace(&self, step: usize) -> Result<JacobianTrace> {
        let lin = self.linearize(Scope::All)?;
        let ns = self.states.len();
        let mut columns: Vec<Variable> = self.states.iter().map(|s| Variable::State(s.frame)).collect();
        columns.extend(lin.landmark_order.iter().map(|&k| Variable::Landmark(k)));
        let states = self
            .states
            .iter()
            .map(|s| StateSnapshot { frame: s.frame, latest: s.x, first_estimate: s.first_estimate })
            .collect();
        let pad = |b: &SMatrix<f64, 2, 9>| {
            let mut m = DMatrix::zeros(2, STATE_DIM);
            m.view_mut((0, 0), (2, 9)).copy_from(b);
            m
        };
        let rows = lin
            .factors
            .iter()
            .map(|lf| match lf {
                LinearFactor::Dense { id, blocks, r } => {
                    let frozen = matches!(id, FactorId::Prior(_));
                    let lin_points = match (&self.prior, frozen) {
                        (Some(p), true) => p.frames.iter().copied().zip(p.lin_points.iter().copied()).collect(),
                        _ => Vec::new(),
                    };
                    TraceRow {
                        factor: id.clone(),
                        frozen,
                        blocks: blocks.iter().map(|(s, b)| (*s, b.clone())).collect(),
                        residual: r.clone(),
                        lin_points,
                    }
                }
                LinearFactor::Projection { id, observer, anchor, landmark, j_obs, j_anc, j_lm, r } => {
                    let mut blocks = vec![(*observer, pad(j_obs))];
                    if anchor == observer {
                        blocks[0].1 += pad(j_anc);
                    } else {
                        blocks.push((*anchor, pad(j_anc)));
                    }
                    blocks.push((ns + landmark, DMatrix::from_column_slice(2, 3, j_lm.as_slice())));
                    TraceRow {
                        factor: id.clone(),
                        frozen: false,
                        blocks,
                        residual: DVector::from_column_slice(r.as_slice()),
                        lin_points: Vec::new(),
                    }
                }
            })
            .collect();
        Ok(JacobianTrace {
            formulation: self.config.formulation,
            step,
            marginalizations: self.marginalizations,
            columns,
            states,
            rows,
        })
    }

    /// Nonlinear whitened residual of every live factor (the prior
    /// excluded) at the current estimates.
    pub fn live_residuals(&self) -> Result<Vec<(FactorId, DVector<f64>)>> {
        let lin = self.linearize(Scope::All)?;
        let mut out = Vec::new();
        for lf in lin.factors {
            match &lf {
                LinearFactor::Dense { id: FactorId::Prior(_), .. } => {}
                LinearFactor::Dense { id, r, .. } => out.push((id.clone(), r.clone())),
                LinearFactor::Projection { id, r, .. } => {
                    out.push((id.clone(), DVector::from_column_slice(r.as_slice())))
                }
            }
        }
        Ok(out)
    }

    /// Applies a world-frame transformation to every state estimate.
    pub fn apply_gauge(&mut self, xi: &crate::state::GaugeTransform) {
        for s in &mut self.states {
            s.x = crate::state::gauge_transform(xi, &s.x);
        }
    }

    /// Eigenvalues of the undamped information of the whole window with
    /// landmarks eliminated and without the marginal or initial prior.
    pub fn gauge_eigenvalues(&self) -> Result<DVector<f64>> {
        let lin = self.linearize(Scope::All)?;
        let live: Vec<LinearFactor> = lin
            .factors
            .into_iter()
            .filter(|f| !matches!(f.id(), FactorId::Prior(_) | FactorId::Initial(_)))
            .collect();
        let ne = NormalEquations::assemble(&live, self.states.len(), lin.landmark_order.len());
        let (h, _) = match ne.reduce(0.0) {
            Ok(v) => v,
            Err(_) => ne.reduce(COV_FLOOR)?,
        };
        Ok(h.symmetric_eigenvalues())
    }
}

/// Measurements of one camera frame. Observation `landmark` fields are
/// track ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameInput {
    pub stamp: f64,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, Default)]
pub struct SessionResult {
    pub outputs: Vec<StepOutput>,
    pub failed: bool,
    pub failure: Option<String>,
    pub marginalizations: usize,
    pub traces: Vec<JacobianTrace>,
}

/// Options for [`run_session`] that do not affect the estimate.
#[derive(Clone, Copy, Debug, Default)]
pub struct SessionOptions {
    /// Record a Jacobian trace after every solve.
    pub record_traces: bool,
}

/// The samples of a time-sorted stream needed to integrate over `[t0, t1]`:
/// the last sample at or before `t0` through the first at or after `t1`.
pub fn imu_batch(imu: &[ImuSample], t0: f64, t1: f64) -> &[ImuSample] {
    let lo = imu.partition_point(|s| s.stamp <= t0).saturating_sub(1);
    let hi = (imu.partition_point(|s| s.stamp < t1) + 1).min(imu.len());
    &imu[lo..hi.max(lo)]
}

/// Runs the smoother over a whole stream. A diverged or failed step ends
/// the session and marks it failed.
pub fn run_session(
    frames: &[FrameInput],
    imu: &[ImuSample],
    config: &SmootherConfig,
    camera: &CameraModel,
    noise: &ImuNoiseConfig,
    init: SystemState,
    options: SessionOptions,
) -> Result<SessionResult> {
    let mut sm = Smoother::new(config.clone(), camera.clone(), noise.clone(), init)?;
    let mut out = SessionResult::default();
    let mut prev_stamp = init.stamp;
    for (k, fr) in frames.iter().enumerate() {
        let batch = imu_batch(imu, prev_stamp, fr.stamp);
        let step = sm.add_frame(fr.stamp, batch, &fr.observations).and_then(|_| {
            let s = sm.solve_and_update()?;
            if options.record_traces {
                out.traces.push(sm.jacobian_trace(k)?);
            }
            if sm.needs_marginalization() {
                sm.marginalize()?;
            }
            Ok(s)
        });
        match step {
            Ok(s) => out.outputs.push(s),
            Err(e @ (Error::MissingImuCoverage { .. } | Error::NonMonotoneStamp { .. })) => return Err(e),
            Err(e) => {
                out.failed = true;
                out.failure = Some(e.to_string());
                break;
            }
        }
        prev_stamp = fr.stamp;
    }
    out.marginalizations = sm.marginalizations();
    Ok(out)
}
