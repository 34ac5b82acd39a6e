//! Experiment plumbing behind the `rifls` binary: a strict TOML
//! experiment file, four commands and their on-disk artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use rifls::eval::{self, EnsembleReport, MethodSpec};
use rifls::imu::ImuNoiseConfig;
use rifls::lie::so3_log;
use rifls::observability::{nullity_audit, JacobianTrace};
use rifls::sim::{self, SimConfig};
use rifls::smoother::{run_session, SessionOptions, SessionRecord, SmootherConfig};

pub const TOOL: &str = "rifls";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("session diverged: {0}")]
    SessionDiverged(String),
    #[error(transparent)]
    Core(rifls::Error),
}

impl CliError {
    /// Process exit code. Usage errors from argument parsing exit with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::InvalidConfig(_) => 3,
            CliError::Io(_) => 4,
            CliError::SessionDiverged(_) => 5,
            CliError::Core(_) => 1,
        }
    }
}

impl From<rifls::Error> for CliError {
    fn from(e: rifls::Error) -> Self {
        match e {
            rifls::Error::InvalidConfig(m) => CliError::InvalidConfig(m),
            rifls::Error::Io(m) => CliError::Io(m),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// One estimator in an experiment. Without `preset` or `smoother` the name
/// itself must be a preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoother: Option<SmootherConfig>,
}

impl MethodEntry {
    pub fn named(name: &str) -> Self {
        MethodEntry { name: name.to_string(), preset: None, smoother: None }
    }

    pub fn resolve(&self) -> Result<MethodSpec> {
        let config = match (&self.preset, &self.smoother) {
            (None, None) => eval::preset(&self.name)?.config,
            (Some(p), None) => eval::preset(p)?.config,
            (None, Some(c)) => c.clone(),
            (Some(_), Some(_)) => {
                return Err(CliError::InvalidConfig(format!("method {}: give either preset or smoother", self.name)))
            }
        };
        config.validate()?;
        Ok(MethodSpec { name: self.name.clone(), config })
    }
}

fn default_methods() -> Vec<MethodEntry> {
    ["ri-fls", "fls-traditional", "ri-fls-exact"].iter().map(|m| MethodEntry::named(m)).collect()
}

fn default_trials() -> usize {
    25
}

fn default_seed0() -> u64 {
    2024
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_window() -> f64 {
    10.0
}

/// Everything that determines an experiment. `sim.imu_noise` corrupts the
/// simulated IMU; `imu_noise` is the model the estimators assume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub imu_noise: ImuNoiseConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodEntry>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_seed0")]
    pub seed0: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Trailing window for the summary NEES, seconds.
    #[serde(default = "default_window")]
    pub window: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            imu_noise: ImuNoiseConfig::default(),
            methods: default_methods(),
            n_trials: default_trials(),
            seed0: default_seed0(),
            out: default_out(),
            window: default_window(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::InvalidConfig(m) => CliError::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.imu_noise.validate()?;
        if self.methods.is_empty() {
            return Err(CliError::InvalidConfig("at least one method is required".into()));
        }
        for (k, m) in self.methods.iter().enumerate() {
            if self.methods[..k].iter().any(|o| o.name == m.name) {
                return Err(CliError::InvalidConfig(format!("duplicate method name {}", m.name)));
            }
            m.resolve()?;
        }
        if self.n_trials == 0 {
            return Err(CliError::InvalidConfig("n_trials must be at least 1".into()));
        }
        if !(self.window > 0.0) {
            return Err(CliError::InvalidConfig("window must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, so formatting and comments in the
    /// TOML file do not matter.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// A named method from the config, or a preset of that name.
    pub fn method(&self, name: &str) -> Result<MethodSpec> {
        match self.methods.iter().find(|m| m.name == name) {
            Some(m) => m.resolve(),
            None => MethodEntry::named(name).resolve(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    fn new(command: &str, config: &ExperimentConfig, seed: u64) -> Self {
        Manifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            config_hash: config.hash(),
            seed,
            method: None,
            input_hash: None,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let mut line = serde_json::to_string(self).map_err(|e| CliError::Io(e.to_string()))?;
        line.push('\n');
        fs::write(&path, line).map_err(io_at(&path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Simulates one stream with `seed` into `out`.
pub fn cmd_simulate(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    config.validate()?;
    let stream = sim::generate_stream(&config.sim, seed)?;
    create_dir(out)?;
    sim::write_stream(&stream, out)?;
    Manifest::new("simulate", config, seed).write(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub frames: usize,
    pub marginalizations: usize,
    pub final_position_error: f64,
    pub final_cost: f64,
}

/// Runs `method` over a stream written by [`cmd_simulate`]. Writes
/// `session.jsonl`, `log.csv`, `trace.jsonl` (every `trace_stride`-th
/// solve) and a manifest. A failed session still writes its outputs and
/// then reports [`CliError::SessionDiverged`].
pub fn cmd_run(
    stream_dir: &Path,
    config: Option<&ExperimentConfig>,
    method: &str,
    out: &Path,
    trace_stride: usize,
) -> Result<RunSummary> {
    let manifest = Manifest::read(stream_dir)?;
    let config = config.unwrap_or(&manifest.config);
    config.validate()?;
    let spec = config.method(method)?;
    if trace_stride == 0 {
        return Err(CliError::InvalidConfig("trace stride must be at least 1".into()));
    }
    let stream = sim::read_stream(stream_dir, manifest.seed)?;
    let Some(truth0) = stream.truth.first() else {
        return Err(CliError::InvalidConfig("stream has no frames".into()));
    };
    let init = sim::initial_estimate(truth0, config.sim.init_velocity_sigma, manifest.seed);
    let result = run_session(
        &stream.frames,
        &stream.imu,
        &spec.config,
        &config.sim.camera,
        &config.imu_noise,
        init,
        SessionOptions { record_traces: true },
    )?;

    create_dir(out)?;
    let mut session = String::new();
    let mut log = String::from("frame,stamp,cost,iterations,marginalizations,position_error,orientation_error\n");
    let mut summary = RunSummary { frames: result.outputs.len(), marginalizations: result.marginalizations, final_position_error: 0.0, final_cost: 0.0 };
    for s in &result.outputs {
        let rec = SessionRecord::from(s);
        session.push_str(&serde_json::to_string(&rec).map_err(|e| CliError::Io(e.to_string()))?);
        session.push('\n');
        let truth = &stream.truth[s.frame];
        let perr = (s.estimate.nav.p - truth.nav.p).norm();
        let rerr = so3_log(&(truth.nav.r * s.estimate.nav.r.inverse())).map(|w| w.norm()).unwrap_or(std::f64::consts::PI);
        log.push_str(&format!(
            "{},{:.6},{:.10e},{},{},{:.10e},{:.10e}\n",
            s.frame, s.stamp, rec.cost, s.iterations, s.marginalizations, perr, rerr
        ));
        summary.final_position_error = perr;
        summary.final_cost = rec.cost;
    }
    let mut traces = String::new();
    for t in result.traces.iter().filter(|t| t.step % trace_stride == 0) {
        traces.push_str(&serde_json::to_string(t).map_err(|e| CliError::Io(e.to_string()))?);
        traces.push('\n');
    }
    for (name, body) in [("session.jsonl", &session), ("log.csv", &log), ("trace.jsonl", &traces)] {
        let p = out.join(name);
        fs::write(&p, body).map_err(io_at(&p))?;
    }
    let mut m = Manifest::new("run", config, manifest.seed);
    m.method = Some(method.to_string());
    m.input_hash = Some(manifest.config_hash);
    m.write(out)?;

    if result.failed {
        let why = result.failure.unwrap_or_default();
        return Err(CliError::SessionDiverged(format!("{method} after {} frames: {why}", result.outputs.len())));
    }
    Ok(summary)
}

/// Audits every trace in a `trace.jsonl` file into `out` (a CSV file), one
/// row per recorded step.
pub fn cmd_audit(trace_path: &Path, out: &Path) -> Result<usize> {
    let text = fs::read_to_string(trace_path).map_err(io_at(trace_path))?;
    let mut csv = String::from(
        "step,marginalizations,formulation,defect_yaw,defect_tx,defect_ty,defect_tz,\
         info_yaw,info_tx,info_ty,info_tz,worst_factor,worst_defect\n",
    );
    let mut rows = 0;
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let trace: JacobianTrace = serde_json::from_str(line)
            .map_err(|e| CliError::Io(format!("{} line {}: {e}", trace_path.display(), k + 1)))?;
        let r = nullity_audit(&trace);
        let d = r.per_column_defect;
        let s = r.spurious_info;
        let (worst, wd) = r.per_row_worst.first().map(|(id, v)| (format!("{id:?}"), *v)).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{:?},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},\"{worst}\",{wd:.6e}\n",
            trace.step, trace.marginalizations, trace.formulation, d[0], d[1], d[2], d[3], s[0], s[1], s[2], s[3]
        ));
        rows += 1;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, csv).map_err(io_at(out))?;
    Ok(rows)
}

/// Runs the whole ensemble. Trial logs go to `out/trials` as they finish;
/// the report and a manifest go to `out`.
pub fn cmd_montecarlo(config: &ExperimentConfig, out: &Path) -> Result<EnsembleReport> {
    config.validate()?;
    let methods = config.methods.iter().map(MethodEntry::resolve).collect::<Result<Vec<_>>>()?;
    let trials = out.join("trials");
    create_dir(&trials)?;
    Manifest::new("montecarlo", config, config.seed0).write(out)?;
    let report =
        eval::run_monte_carlo(&config.sim, &config.imu_noise, &methods, config.n_trials, config.seed0, config.window, Some(&trials))?;
    eval::write_report(&report, out)?;
    Ok(report)
}

/// Prints a summary table of a report.
pub fn print_report(report: &EnsembleReport, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{:<22} {:>9} {:>10} {:>10} {:>10} {:>12}", "method", "n_s", "NEES pos", "NEES ori", "NEES pose", "RMSE pos [m]")?;
    for m in &report.methods {
        writeln!(
            w,
            "{:<22} {:>9} {:>10.3} {:>10.3} {:>10.3} {:>12.4}",
            m.name,
            format!("{}/{}", m.n_s, m.n_trials),
            m.trailing_nees[0],
            m.trailing_nees[1],
            m.trailing_nees[2],
            m.final_rmse[0]
        )?;
    }
    Ok(())
}
