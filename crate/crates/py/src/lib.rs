//! Python bindings: Lie-group maps, error states, simulation, sessions,
//! nullity audits and Monte-Carlo summaries. Vectors and matrices cross the
//! boundary as (nested) lists of floats.

use nalgebra::{Matrix3, Matrix5, SMatrix, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use rifls::eval;
use rifls::imu::ImuNoiseConfig;
use rifls::lie::{se23_exp, se23_log, so3_exp, so3_log, Rot3, TangentSE23, Vector9, SE23};
use rifls::observability::{nullity_audit_with, NullspaceEval};
use rifls::sim::{self, SimConfig};
use rifls::smoother::{imu_batch, run_session as core_run_session, SessionOptions, Smoother, SmootherConfig};
use rifls::state::{self, ErrorFormulation, Vector15};

create_exception!(pyrifls, RiflsError, PyException);

fn err(e: rifls::Error) -> PyErr {
    match e {
        rifls::Error::InvalidConfig(m) => PyValueError::new_err(m),
        other => RiflsError::new_err(other.to_string()),
    }
}

fn formulation(name: &str) -> PyResult<ErrorFormulation> {
    match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "traditional" => Ok(ErrorFormulation::Traditional),
        "rightinvariant" | "ri" => Ok(ErrorFormulation::RightInvariant),
        _ => Err(PyValueError::new_err(format!("unknown formulation {name:?}"))),
    }
}

fn vec3(v: &[f64]) -> PyResult<Vector3<f64>> {
    match v {
        [a, b, c] => Ok(Vector3::new(*a, *b, *c)),
        _ => Err(PyValueError::new_err(format!("expected 3 values, got {}", v.len()))),
    }
}

fn rows<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> Vec<Vec<f64>> {
    (0..R).map(|i| (0..C).map(|j| m[(i, j)]).collect()).collect()
}

fn mat3(m: &[Vec<f64>]) -> PyResult<Matrix3<f64>> {
    if m.len() != 3 || m.iter().any(|r| r.len() != 3) {
        return Err(PyValueError::new_err("expected a 3x3 matrix"));
    }
    Ok(Matrix3::from_fn(|i, j| m[i][j]))
}

/// Rotation vector to rotation matrix.
#[pyfunction]
#[pyo3(name = "so3_exp")]
fn so3_exp_py(w: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(so3_exp(&vec3(&w)?).matrix()))
}

/// Rotation matrix to rotation vector.
#[pyfunction]
#[pyo3(name = "so3_log")]
fn so3_log_py(r: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let rot = Rot3::try_from_matrix(mat3(&r)?).ok_or_else(|| PyValueError::new_err("not a rotation matrix"))?;
    Ok(so3_log(&rot).map_err(err)?.iter().copied().collect())
}

/// Tangent vector (dtheta, dv, dp) to a 5x5 SE_2(3) matrix.
#[pyfunction]
#[pyo3(name = "se23_exp")]
fn se23_exp_py(xi: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    if xi.len() != 9 {
        return Err(PyValueError::new_err("expected 9 values"));
    }
    let x = se23_exp(&TangentSE23::from_vector(&Vector9::from_column_slice(&xi)));
    Ok(rows(&x.to_matrix()))
}

/// 5x5 SE_2(3) matrix to tangent vector (dtheta, dv, dp).
#[pyfunction]
#[pyo3(name = "se23_log")]
fn se23_log_py(m: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    if m.len() != 5 || m.iter().any(|r| r.len() != 5) {
        return Err(PyValueError::new_err("expected a 5x5 matrix"));
    }
    let x = SE23::from_matrix_unchecked(&Matrix5::from_fn(|i, j| m[i][j]));
    Ok(se23_log(&x).map_err(err)?.to_vector().iter().copied().collect())
}

/// Navigation state, biases and stamp.
#[pyclass(name = "SystemState", from_py_object)]
#[derive(Clone)]
pub struct PySystemState {
    inner: state::SystemState,
}

#[pymethods]
impl PySystemState {
    #[new]
    #[pyo3(signature = (rotation, velocity, position, bias_g = vec![0.0; 3], bias_a = vec![0.0; 3], stamp = 0.0))]
    fn new(
        rotation: Vec<Vec<f64>>,
        velocity: Vec<f64>,
        position: Vec<f64>,
        bias_g: Vec<f64>,
        bias_a: Vec<f64>,
        stamp: f64,
    ) -> PyResult<Self> {
        let r = Rot3::try_from_matrix(mat3(&rotation)?).ok_or_else(|| PyValueError::new_err("not a rotation matrix"))?;
        let nav = SE23::new(r, vec3(&velocity)?, vec3(&position)?);
        Ok(PySystemState { inner: state::SystemState::new(nav, vec3(&bias_g)?, vec3(&bias_a)?, stamp) })
    }

    #[getter]
    fn rotation(&self) -> Vec<Vec<f64>> {
        rows(self.inner.nav.r.matrix())
    }

    #[getter]
    fn velocity(&self) -> Vec<f64> {
        self.inner.nav.v.iter().copied().collect()
    }

    #[getter]
    fn position(&self) -> Vec<f64> {
        self.inner.nav.p.iter().copied().collect()
    }

    #[getter]
    fn bias_g(&self) -> Vec<f64> {
        self.inner.bias_g.iter().copied().collect()
    }

    #[getter]
    fn bias_a(&self) -> Vec<f64> {
        self.inner.bias_a.iter().copied().collect()
    }

    #[getter]
    fn stamp(&self) -> f64 {
        self.inner.stamp
    }

    /// 15-vector error `self - other` in the given formulation, ordered
    /// (theta, v, p, b_g, b_a).
    fn error(&self, other: &PySystemState, formulation_name: &str) -> PyResult<Vec<f64>> {
        let e = state::error_vec(formulation(formulation_name)?, &self.inner, &other.inner).map_err(err)?;
        Ok(e.iter().copied().collect())
    }

    /// The state moved by a 15-vector error.
    fn retract(&self, dx: Vec<f64>, formulation_name: &str) -> PyResult<PySystemState> {
        if dx.len() != 15 {
            return Err(PyValueError::new_err("expected 15 values"));
        }
        let x = state::retract_vec(formulation(formulation_name)?, &self.inner, &Vector15::from_column_slice(&dx));
        Ok(PySystemState { inner: x })
    }

    fn __repr__(&self) -> String {
        let p = self.inner.nav.p;
        format!("SystemState(t={:.3}, p=[{:.4}, {:.4}, {:.4}])", self.inner.stamp, p.x, p.y, p.z)
    }
}

/// A simulated session: IMU samples, camera frames and truth.
#[pyclass(name = "SimStream")]
pub struct PySimStream {
    config: SimConfig,
    inner: sim::SimStream,
}

#[pymethods]
impl PySimStream {
    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.frames.len()
    }

    #[getter]
    fn n_imu(&self) -> usize {
        self.inner.imu.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn frame_stamps(&self) -> Vec<f64> {
        self.inner.frames.iter().map(|f| f.stamp).collect()
    }

    /// Number of feature observations in each frame.
    #[getter]
    fn observation_counts(&self) -> Vec<usize> {
        self.inner.frames.iter().map(|f| f.observations.len()).collect()
    }

    #[getter]
    fn truth(&self) -> Vec<PySystemState> {
        self.inner.truth.iter().map(|x| PySystemState { inner: *x }).collect()
    }

    /// `(mean speed, landmarks per frame, track length, tracks)`.
    #[getter]
    fn stats(&self) -> (f64, f64, f64, usize) {
        let s = &self.inner.stats;
        (s.mean_speed, s.mean_landmarks_per_frame, s.mean_track_length, s.tracks)
    }

    fn write(&self, dir: &str) -> PyResult<()> {
        sim::write_stream(&self.inner, std::path::Path::new(dir)).map_err(err)
    }
}

fn sim_config(duration: f64, config_json: Option<&str>) -> PyResult<SimConfig> {
    let mut cfg: SimConfig = match config_json {
        Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SimConfig::default(),
    };
    cfg.duration = duration;
    Ok(cfg)
}

/// Simulates a torus session. `config_json` overrides the simulator
/// defaults; unknown keys are rejected.
#[pyfunction]
#[pyo3(signature = (duration = 60.0, seed = 0, config_json = None, noiseless = false))]
fn simulate(duration: f64, seed: u64, config_json: Option<&str>, noiseless: bool) -> PyResult<PySimStream> {
    let mut config = sim_config(duration, config_json)?;
    if noiseless {
        config = config.noiseless();
    }
    let inner = sim::generate_stream(&config, seed).map_err(err)?;
    Ok(PySimStream { config, inner })
}

/// Outcome of one smoother session.
#[pyclass(name = "SessionResult")]
pub struct PySessionResult {
    #[pyo3(get)]
    stamps: Vec<f64>,
    #[pyo3(get)]
    positions: Vec<Vec<f64>>,
    #[pyo3(get)]
    position_errors: Vec<f64>,
    #[pyo3(get)]
    costs: Vec<f64>,
    #[pyo3(get)]
    failed: bool,
    #[pyo3(get)]
    failure: Option<String>,
    #[pyo3(get)]
    marginalizations: usize,
    estimates: Vec<state::SystemState>,
}

#[pymethods]
impl PySessionResult {
    #[getter]
    fn estimates(&self) -> Vec<PySystemState> {
        self.estimates.iter().map(|x| PySystemState { inner: *x }).collect()
    }

    fn __len__(&self) -> usize {
        self.stamps.len()
    }
}

fn method_config(method: &str) -> PyResult<SmootherConfig> {
    Ok(eval::preset(method).map_err(err)?.config)
}

/// Names of the built-in estimator presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    eval::PRESETS.to_vec()
}

/// Runs a preset over a stream, starting from the simulator's initial
/// estimate rule (true pose, perturbed velocity, zero biases).
#[pyfunction]
#[pyo3(signature = (stream, method = "ri-fls"))]
fn run_session(py: Python<'_>, stream: &PySimStream, method: &str) -> PyResult<PySessionResult> {
    let config = method_config(method)?;
    let s = &stream.inner;
    let truth0 = *s.truth.first().ok_or_else(|| PyValueError::new_err("stream has no frames"))?;
    let init = sim::initial_estimate(&truth0, stream.config.init_velocity_sigma, s.seed);
    let noise = ImuNoiseConfig::default();
    let camera = stream.config.camera.clone();
    let r = py
        .detach(|| core_run_session(&s.frames, &s.imu, &config, &camera, &noise, init, SessionOptions::default()))
        .map_err(err)?;
    let mut out = PySessionResult {
        stamps: vec![],
        positions: vec![],
        position_errors: vec![],
        costs: vec![],
        failed: r.failed,
        failure: r.failure,
        marginalizations: r.marginalizations,
        estimates: vec![],
    };
    for o in &r.outputs {
        out.stamps.push(o.stamp);
        out.positions.push(o.estimate.nav.p.iter().copied().collect());
        out.position_errors.push((o.estimate.nav.p - s.truth[o.frame].nav.p).norm());
        out.costs.push(o.cost_history.last().copied().unwrap_or(0.0));
        out.estimates.push(o.estimate);
    }
    Ok(out)
}

/// Runs a smoother without any initial prior over the first `frames`
/// frames and returns the normalized nullity defects `|J n| / |J|_F` for
/// (yaw, x, y, z), evaluated at latest or first estimates.
#[pyfunction]
#[pyo3(signature = (stream, formulation_name = "right-invariant", frames = 20, fej = false))]
fn nullity_defects(stream: &PySimStream, formulation_name: &str, frames: usize, fej: bool) -> PyResult<Vec<f64>> {
    let s = &stream.inner;
    if frames == 0 || frames > s.frames.len() {
        return Err(PyValueError::new_err(format!("frames must be in 1..={}", s.frames.len())));
    }
    let config = SmootherConfig { formulation: formulation(formulation_name)?, fej, ..SmootherConfig::default() };
    let mut sm = Smoother::new(config, stream.config.camera.clone(), ImuNoiseConfig::default(), s.truth[0]).map_err(err)?;
    for k in 0..frames {
        let t0 = if k == 0 { s.frames[0].stamp } else { s.frames[k - 1].stamp };
        let f = &s.frames[k];
        sm.add_frame(f.stamp, imu_batch(&s.imu, t0, f.stamp), &f.observations).map_err(err)?;
        sm.solve_and_update().map_err(err)?;
        if k + 1 < frames && sm.needs_marginalization() {
            sm.marginalize().map_err(err)?;
        }
    }
    let mode = if fej { NullspaceEval::FirstEstimates } else { NullspaceEval::Latest };
    let trace = sm.jacobian_trace(frames - 1).map_err(err)?;
    Ok(nullity_audit_with(&trace, mode).per_column_defect.to_vec())
}

/// Monte-Carlo ensemble over presets. Returns one dict per method with
/// `n_s`, trailing NEES (position, orientation, pose) and final RMSE
/// (position, orientation, gyro bias, accel bias).
#[pyfunction]
#[pyo3(signature = (methods, n_trials = 4, seed0 = 2024, duration = 20.0, window = 10.0, config_json = None))]
fn monte_carlo<'py>(
    py: Python<'py>,
    methods: Vec<String>,
    n_trials: usize,
    seed0: u64,
    duration: f64,
    window: f64,
    config_json: Option<&str>,
) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
    let cfg = sim_config(duration, config_json)?;
    let specs = methods.iter().map(|m| eval::preset(m).map_err(err)).collect::<PyResult<Vec<_>>>()?;
    let noise = ImuNoiseConfig::default();
    let report = py.detach(|| eval::run_monte_carlo(&cfg, &noise, &specs, n_trials, seed0, window, None)).map_err(err)?;
    report
        .methods
        .iter()
        .map(|m| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("name", &m.name)?;
            d.set_item("n_trials", m.n_trials)?;
            d.set_item("n_s", m.n_s)?;
            d.set_item("nees", m.trailing_nees.to_vec())?;
            d.set_item("rmse", m.final_rmse.to_vec())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
pub fn pyrifls(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RiflsError", m.py().get_type::<RiflsError>())?;
    m.add_class::<PySystemState>()?;
    m.add_class::<PySimStream>()?;
    m.add_class::<PySessionResult>()?;
    m.add_function(wrap_pyfunction!(so3_exp_py, m)?)?;
    m.add_function(wrap_pyfunction!(so3_log_py, m)?)?;
    m.add_function(wrap_pyfunction!(se23_exp_py, m)?)?;
    m.add_function(wrap_pyfunction!(se23_log_py, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_session, m)?)?;
    m.add_function(wrap_pyfunction!(nullity_defects, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    Ok(())
}
