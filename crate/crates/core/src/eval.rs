//! Monte-Carlo consistency evaluation: NEES and RMSE curves over an
//! ensemble of simulated trials, trailing-window summaries and report files.
//!
//! NEES uses each estimator's own error convention, so the error and the
//! covariance it is compared against live in the same tangent space. RMSE
//! uses plain Euclidean position error and `log(R R_est^T)` for rotation so
//! that methods are comparable.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{ImuNoiseConfig, JacobianMode};
use crate::lie::so3_log;
use crate::sim::{generate_stream, initial_estimate, trial_seed, SimConfig};
use crate::smoother::{run_session, InitialPrior, SessionOptions, SmootherConfig};
use crate::state::{error_vec, ErrorFormulation, SystemState, POS, ROT};

/// A trial counts as successful when its final position error is at most this.
pub const SUCCESS_POSITION_ERROR: f64 = 100.0;

/// Added to a covariance block that fails to factor.
pub const NEES_REGULARIZATION: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Position,
    Orientation,
    Pose,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Position, Component::Orientation, Component::Pose];

    pub fn dim(self) -> usize {
        match self {
            Component::Pose => 6,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Position => "position",
            Component::Orientation => "orientation",
            Component::Pose => "pose",
        }
    }

    // Indices into the (p, theta) pose vector.
    fn range(self) -> std::ops::Range<usize> {
        match self {
            Component::Position => 0..3,
            Component::Orientation => 3..6,
            Component::Pose => 0..6,
        }
    }
}

/// A named estimator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub config: SmootherConfig,
}

/// Names of the built-in estimator presets.
pub const PRESETS: [&str; 5] = ["fls-traditional", "fls-traditional-fej", "ri-fls", "ri-fls-exact", "ri-fls-smart"];

/// Parallax gate of `ri-fls-smart`, in degrees. Low-parallax tracks stay
/// out of the problem instead of entering as poorly constrained landmarks.
pub const SMART_GATE_DEG: f64 = 3.0;

/// Built-in estimator configuration by name. Every preset anchors the
/// first state with [`InitialPrior::default`], the counterpart of starting
/// from the true pose.
pub fn preset(name: &str) -> Result<MethodSpec> {
    let base = SmootherConfig { initial_prior: Some(InitialPrior::default()), ..SmootherConfig::default() };
    let config = match name {
        "fls-traditional" => SmootherConfig { formulation: ErrorFormulation::Traditional, ..base },
        "fls-traditional-fej" => SmootherConfig { formulation: ErrorFormulation::Traditional, fej: true, ..base },
        "ri-fls" => base,
        "ri-fls-exact" => SmootherConfig { imu_jac_mode: JacobianMode::Exact, ..base },
        "ri-fls-smart" => SmootherConfig { disparity_gate_deg: SMART_GATE_DEG, ..base },
        _ => return Err(Error::InvalidConfig(format!("unknown method '{name}'"))),
    };
    Ok(MethodSpec { name: name.to_string(), config })
}

/// Errors and covariance of one estimate against truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub stamp: f64,
    /// `(dp, dtheta)` in the estimator's own error convention.
    pub pose_error: [f64; 6],
    /// Covariance of `pose_error`, row-major 6x6.
    pub pose_cov: Vec<f64>,
    /// Euclidean position error `p - p_est`.
    pub dp: [f64; 3],
    /// `log(R R_est^T)`.
    pub dtheta: [f64; 3],
    pub dbg: [f64; 3],
    pub dba: [f64; 3],
}

impl FrameLog {
    pub fn new(f: ErrorFormulation, truth: &SystemState, estimate: &SystemState, nav_cov: &crate::state::Matrix15) -> Result<Self> {
        let e = error_vec(f, truth, estimate)?;
        let idx = pose_indices();
        let mut pose_error = [0.0; 6];
        let mut pose_cov = vec![0.0; 36];
        for i in 0..6 {
            pose_error[i] = e[idx[i]];
            for j in 0..6 {
                pose_cov[6 * i + j] = nav_cov[(idx[i], idx[j])];
            }
        }
        let arr = |v: Vector3<f64>| [v.x, v.y, v.z];
        Ok(FrameLog {
            stamp: estimate.stamp,
            pose_error,
            pose_cov,
            dp: arr(truth.nav.p - estimate.nav.p),
            dtheta: arr(so3_log(&(truth.nav.r * estimate.nav.r.inverse()))?),
            dbg: arr(truth.bias_g - estimate.bias_g),
            dba: arr(truth.bias_a - estimate.bias_a),
        })
    }

    /// Squared Mahalanobis distance of one component, and whether the
    /// covariance had to be regularized.
    pub fn mahalanobis(&self, c: Component) -> (f64, bool) {
        let r = c.range();
        let n = r.len();
        let d = DVector::from_iterator(n, r.clone().map(|i| self.pose_error[i]));
        if d.iter().all(|v| *v == 0.0) {
            return (0.0, false);
        }
        let cov = DMatrix::from_fn(n, n, |i, j| self.pose_cov[6 * (r.start + i) + r.start + j]);
        match cov.clone().cholesky() {
            Some(ch) => (d.dot(&ch.solve(&d)), false),
            None => {
                let reg = cov + DMatrix::identity(n, n) * NEES_REGULARIZATION;
                let val = match reg.clone().cholesky() {
                    Some(ch) => d.dot(&ch.solve(&d)),
                    None => f64::INFINITY,
                };
                (val, true)
            }
        }
    }

    /// Squared Euclidean error of one component.
    pub fn squared_error(&self, c: RmseComponent) -> f64 {
        let v = match c {
            RmseComponent::Position => self.dp,
            RmseComponent::Orientation => self.dtheta,
            RmseComponent::GyroBias => self.dbg,
            RmseComponent::AccelBias => self.dba,
        };
        v.iter().map(|x| x * x).sum()
    }
}

fn pose_indices() -> [usize; 6] {
    [POS, POS + 1, POS + 2, ROT, ROT + 1, ROT + 2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RmseComponent {
    Position,
    Orientation,
    GyroBias,
    AccelBias,
}

impl RmseComponent {
    pub const ALL: [RmseComponent; 4] =
        [RmseComponent::Position, RmseComponent::Orientation, RmseComponent::GyroBias, RmseComponent::AccelBias];

    pub fn name(self) -> &'static str {
        match self {
            RmseComponent::Position => "position",
            RmseComponent::Orientation => "orientation",
            RmseComponent::GyroBias => "gyro_bias",
            RmseComponent::AccelBias => "accel_bias",
        }
    }
}

/// One method on one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: String,
    pub formulation: ErrorFormulation,
    pub trial: usize,
    pub seed: u64,
    pub frames: Vec<FrameLog>,
    /// The session stopped early (divergence or a solver failure).
    pub failure: Option<String>,
    pub expected_frames: usize,
    pub success: bool,
    pub marginalizations: usize,
}

impl TrialResult {
    pub fn final_position_error(&self) -> Option<f64> {
        self.frames.last().map(|f| f.dp.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// Success: the session ran to the end and the final position error is
    /// within bounds.
    fn judge(&mut self) {
        let complete = self.failure.is_none() && self.frames.len() == self.expected_frames;
        self.success = complete && self.final_position_error().is_some_and(|e| e <= SUCCESS_POSITION_ERROR);
    }
}

fn successful<'a>(trials: &'a [TrialResult]) -> Vec<&'a TrialResult> {
    trials.iter().filter(|t| t.success).collect()
}

/// Ensemble NEES of `component` at frame `index` over successful trials,
/// with the number of covariances that needed regularization.
pub fn nees(trials: &[TrialResult], component: Component, index: usize) -> Result<(f64, usize)> {
    let ok = successful(trials);
    if ok.is_empty() {
        return Err(Error::NoSuccessfulTrials);
    }
    let mut sum = 0.0;
    let mut flagged = 0;
    for t in &ok {
        let (v, reg) = t.frames[index].mahalanobis(component);
        sum += v;
        flagged += reg as usize;
    }
    Ok((sum / ok.len() as f64, flagged))
}

/// Ensemble RMSE of `component` at frame `index` over successful trials.
pub fn rmse(trials: &[TrialResult], component: RmseComponent, index: usize) -> Result<f64> {
    let ok = successful(trials);
    if ok.is_empty() {
        return Err(Error::NoSuccessfulTrials);
    }
    let sum: f64 = ok.iter().map(|t| t.frames[index].squared_error(component)).sum();
    Ok((sum / ok.len() as f64).sqrt())
}

/// Mean of the samples with `t >= t_end - window`.
pub fn trailing_mean(curve: &[(f64, f64)], window: f64) -> Result<f64> {
    let (Some(first), Some(last)) = (curve.first(), curve.last()) else {
        return Err(Error::CurveTooShort { span: 0.0, window });
    };
    let span = last.0 - first.0;
    if span < window - 1e-9 {
        return Err(Error::CurveTooShort { span, window });
    }
    let start = last.0 - window - 1e-9;
    let vals: Vec<f64> = curve.iter().filter(|(t, _)| *t >= start).map(|(_, v)| *v).collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Curves and summaries of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    /// Error convention the NEES is computed in.
    pub convention: ErrorFormulation,
    pub n_trials: usize,
    pub n_s: usize,
    pub stamps: Vec<f64>,
    /// Per component, in `Component::ALL` order.
    pub nees: Vec<Vec<f64>>,
    /// Per component, in `RmseComponent::ALL` order.
    pub rmse: Vec<Vec<f64>>,
    pub trailing_nees: Vec<f64>,
    pub final_rmse: Vec<f64>,
    /// Covariance blocks that had to be regularized.
    pub regularized: usize,
}

impl MethodReport {
    pub fn nees_curve(&self, c: Component) -> Vec<(f64, f64)> {
        let k = Component::ALL.iter().position(|x| *x == c).unwrap();
        self.stamps.iter().copied().zip(self.nees[k].iter().copied()).collect()
    }

    pub fn rmse_curve(&self, c: RmseComponent) -> Vec<(f64, f64)> {
        let k = RmseComponent::ALL.iter().position(|x| *x == c).unwrap();
        self.stamps.iter().copied().zip(self.rmse[k].iter().copied()).collect()
    }

    pub fn trailing(&self, c: Component) -> f64 {
        self.trailing_nees[Component::ALL.iter().position(|x| *x == c).unwrap()]
    }

    pub fn final_rmse_of(&self, c: RmseComponent) -> f64 {
        self.final_rmse[RmseComponent::ALL.iter().position(|x| *x == c).unwrap()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub window: f64,
    pub methods: Vec<MethodReport>,
}

impl EnsembleReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Aggregates trial logs into per-method curves. Methods appear in the
/// order of `names`; the result does not depend on the order of `trials`.
pub fn aggregate(names: &[String], trials: &[TrialResult], window: f64) -> Result<EnsembleReport> {
    let mut methods = Vec::new();
    for name in names {
        let mut mine: Vec<TrialResult> = trials.iter().filter(|t| &t.method == name).cloned().collect();
        mine.sort_by_key(|t| t.trial);
        let convention = mine.first().map(|t| t.formulation).unwrap_or(ErrorFormulation::RightInvariant);
        let ok = successful(&mine);
        let n_frames = ok.iter().map(|t| t.frames.len()).min().unwrap_or(0);
        let stamps: Vec<f64> = ok.first().map(|t| t.frames[..n_frames].iter().map(|f| f.stamp).collect()).unwrap_or_default();
        let mut regularized = 0;
        let mut nees_curves = vec![Vec::with_capacity(n_frames); 3];
        for (c, curve) in Component::ALL.iter().zip(nees_curves.iter_mut()) {
            for k in 0..n_frames {
                let (v, flagged) = nees(&mine, *c, k)?;
                regularized += flagged;
                curve.push(v);
            }
        }
        let mut rmse_curves = vec![Vec::with_capacity(n_frames); 4];
        for (c, curve) in RmseComponent::ALL.iter().zip(rmse_curves.iter_mut()) {
            for k in 0..n_frames {
                curve.push(rmse(&mine, *c, k)?);
            }
        }
        let trailing_nees = nees_curves
            .iter()
            .map(|c| {
                let curve: Vec<(f64, f64)> = stamps.iter().copied().zip(c.iter().copied()).collect();
                trailing_mean(&curve, window).unwrap_or(f64::NAN)
            })
            .collect();
        let final_rmse = rmse_curves.iter().map(|c| c.last().copied().unwrap_or(f64::NAN)).collect();
        methods.push(MethodReport {
            name: name.clone(),
            convention,
            n_trials: mine.len(),
            n_s: ok.len(),
            stamps,
            nees: nees_curves,
            rmse: rmse_curves,
            trailing_nees,
            final_rmse,
            regularized,
        });
    }
    Ok(EnsembleReport { window, methods })
}

/// Runs every method on one simulated trial. All methods see the same stream
/// and the same initial estimate.
pub fn run_trial(sim: &SimConfig, noise: &ImuNoiseConfig, methods: &[MethodSpec], seed0: u64, trial: usize) -> Result<Vec<TrialResult>> {
    let seed = trial_seed(seed0, trial);
    let stream = generate_stream(sim, seed)?;
    let init = initial_estimate(&stream.truth[0], sim.init_velocity_sigma, seed);
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let f = m.config.formulation;
        let session = run_session(&stream.frames, &stream.imu, &m.config, &sim.camera, noise, init, SessionOptions::default())?;
        let mut frames = Vec::with_capacity(session.outputs.len());
        for (o, truth) in session.outputs.iter().zip(&stream.truth) {
            frames.push(FrameLog::new(f, truth, &o.estimate, &o.nav_cov)?);
        }
        let mut t = TrialResult {
            method: m.name.clone(),
            formulation: f,
            trial,
            seed,
            frames,
            failure: session.failure,
            expected_frames: stream.frames.len(),
            success: false,
            marginalizations: session.marginalizations,
        };
        t.judge();
        out.push(t);
    }
    Ok(out)
}

/// Runs `n_trials` trials in parallel. When `log_dir` is given, every trial
/// log is written there as soon as it completes.
pub fn run_monte_carlo(
    sim: &SimConfig,
    noise: &ImuNoiseConfig,
    methods: &[MethodSpec],
    n_trials: usize,
    seed0: u64,
    window: f64,
    log_dir: Option<&Path>,
) -> Result<EnsembleReport> {
    if n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods configured".into()));
    }
    for m in methods {
        m.config.validate()?;
    }
    if let Some(d) = log_dir {
        fs::create_dir_all(d)?;
    }
    let per_trial: Vec<Vec<TrialResult>> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let res = run_trial(sim, noise, methods, seed0, i)?;
            if let Some(d) = log_dir {
                for t in &res {
                    write_trial(t, d)?;
                }
            }
            Ok(res)
        })
        .collect::<Result<_>>()?;
    let trials: Vec<TrialResult> = per_trial.into_iter().flatten().collect();
    let names: Vec<String> = methods.iter().map(|m| m.name.clone()).collect();
    aggregate(&names, &trials, window)
}

pub fn trial_file_name(method: &str, trial: usize) -> String {
    format!("{method}_{trial:04}.json")
}

pub fn write_trial(t: &TrialResult, dir: &Path) -> Result<()> {
    let json = serde_json::to_string(t).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join(trial_file_name(&t.method, t.trial)), json)?;
    Ok(())
}

/// Reads every `*.json` trial log in `dir`, sorted by file name.
pub fn read_trials(dir: &Path) -> Result<Vec<TrialResult>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let s = fs::read_to_string(p)?;
            serde_json::from_str(&s).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn convention_label(f: ErrorFormulation) -> &'static str {
    match f {
        ErrorFormulation::Traditional => "traditional",
        ErrorFormulation::RightInvariant => "right_invariant",
    }
}

/// Writes `curves.csv` (long format), `summary.csv` (one row per method) and
/// one `curves/<method>_<metric>_<component>.csv` per curve.
pub fn write_report(report: &EnsembleReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("curves"))?;
    let mut long = fs::File::create(dir.join("curves.csv"))?;
    writeln!(long, "method,metric,component,t,value")?;
    for m in &report.methods {
        let mut curves: Vec<(&str, &str, Vec<(f64, f64)>)> = Vec::new();
        for c in Component::ALL {
            curves.push(("nees", c.name(), m.nees_curve(c)));
        }
        for c in RmseComponent::ALL {
            curves.push(("rmse", c.name(), m.rmse_curve(c)));
        }
        for (metric, comp, curve) in curves {
            let mut f = fs::File::create(dir.join("curves").join(format!("{}_{metric}_{comp}.csv", m.name)))?;
            writeln!(f, "t,value")?;
            for (t, v) in curve {
                writeln!(f, "{t:.6},{v:.10e}")?;
                writeln!(long, "{},{metric},{comp},{t:.6},{v:.10e}", m.name)?;
            }
        }
    }

    let mut s = fs::File::create(dir.join("summary.csv"))?;
    writeln!(
        s,
        "method,convention,n_trials,n_s,window,nees_position,nees_orientation,nees_pose,\
         rmse_position,rmse_orientation,rmse_gyro_bias,rmse_accel_bias,regularized"
    )?;
    for m in &report.methods {
        writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            m.name,
            convention_label(m.convention),
            m.n_trials,
            m.n_s,
            report.window,
            m.trailing_nees[0],
            m.trailing_nees[1],
            m.trailing_nees[2],
            m.final_rmse[0],
            m.final_rmse[1],
            m.final_rmse[2],
            m.final_rmse[3],
            m.regularized
        )?;
    }
    Ok(())
}

/// Joint pose covariance of one frame log as a matrix.
pub fn pose_covariance(f: &FrameLog) -> Matrix6<f64> {
    Matrix6::from_row_slice(&f.pose_cov)
}
