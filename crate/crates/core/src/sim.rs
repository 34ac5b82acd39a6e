//! Seeded synthesis of the walled-room torus experiment: scene, trajectory,
//! IMU samples, camera observations and a ground-truth feature tracker.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{integrate, ImuNoiseConfig, ImuSample};
use crate::lie::{so3_exp, so3_log, Rot3, SE23};
use crate::smoother::FrameInput;
use crate::state::{gravity, SystemState};
use crate::vision::{CameraModel, Observation};

/// Sub-stream ids, one per random source.
const STREAM_SCENE: u64 = 1;
const STREAM_IMU: u64 = 2;
const STREAM_CAMERA: u64 = 3;
const STREAM_TRACKER: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_BIAS0: u64 = 6;

/// Independent generator for one `(seed, source)` pair.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of trial `trial` in an ensemble started from `seed0`.
pub fn trial_seed(seed0: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed0);
    rng.set_stream(1 << 32 | trial as u64);
    rng.random()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusTrajectory {
    pub major_radius: f64,
    pub minor_radius: f64,
    /// Rate around the major circle, rad/s.
    pub omega_major: f64,
    /// Rate around the tube, rad/s.
    pub omega_minor: f64,
    pub center: [f64; 3],
    /// Peak bank angle about the direction of travel, rad.
    pub bank_amplitude: f64,
}

impl Default for TorusTrajectory {
    fn default() -> Self {
        TorusTrajectory {
            major_radius: 5.0,
            minor_radius: 1.0,
            omega_major: 0.425,
            omega_minor: 0.9,
            center: [0.0, 0.0, 0.0],
            bank_amplitude: 0.3,
        }
    }
}

impl TorusTrajectory {
    fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let (th, ph) = (self.omega_major * t, self.omega_minor * t);
        let rho = self.major_radius + self.minor_radius * ph.cos();
        self.center() + Vector3::new(rho * th.cos(), rho * th.sin(), self.minor_radius * ph.sin())
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let (wm, wn) = (self.omega_major, self.omega_minor);
        let (th, ph) = (wm * t, wn * t);
        let rho = self.major_radius + self.minor_radius * ph.cos();
        let drho = -self.minor_radius * wn * ph.sin();
        Vector3::new(
            drho * th.cos() - rho * wm * th.sin(),
            drho * th.sin() + rho * wm * th.cos(),
            self.minor_radius * wn * ph.cos(),
        )
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let (wm, wn) = (self.omega_major, self.omega_minor);
        let (th, ph) = (wm * t, wn * t);
        let rho = self.major_radius + self.minor_radius * ph.cos();
        let drho = -self.minor_radius * wn * ph.sin();
        let ddrho = -self.minor_radius * wn * wn * ph.cos();
        Vector3::new(
            ddrho * th.cos() - 2.0 * drho * wm * th.sin() - rho * wm * wm * th.cos(),
            ddrho * th.sin() + 2.0 * drho * wm * th.cos() - rho * wm * wm * th.sin(),
            -self.minor_radius * wn * wn * ph.sin(),
        )
    }

    /// Body x along the velocity, body z as close to up as the velocity
    /// allows, then banked about x.
    pub fn orientation(&self, t: f64) -> Rot3 {
        let x = self.velocity(t).normalize();
        let y = Vector3::z().cross(&x).normalize();
        let z = x.cross(&y);
        let level = Matrix3::from_columns(&[x, y, z]);
        let bank = so3_exp(&(Vector3::x() * self.bank_amplitude * (self.omega_minor * t).sin()));
        Rot3::from_matrix_unchecked(level * bank.matrix())
    }

    /// Body angular velocity, by a fourth-order central difference of the
    /// relative rotation.
    pub fn angular_velocity(&self, t: f64) -> Vector3<f64> {
        const H: f64 = 1e-3;
        let r0 = self.orientation(t).inverse();
        let g = |s: f64| so3_log(&(r0 * self.orientation(t + s))).expect("small relative rotation");
        (8.0 * (g(H) - g(-H)) - (g(2.0 * H) - g(-2.0 * H))) / (12.0 * H)
    }

    pub fn nav(&self, t: f64) -> SE23 {
        SE23::new(self.orientation(t), self.velocity(t), self.position(t))
    }

    /// Truth state (zero biases), body specific force and body rate at `t`.
    pub fn sample_truth(&self, t: f64) -> (SystemState, Vector3<f64>, Vector3<f64>) {
        let nav = self.nav(t);
        let a_s = nav.r.inverse() * (self.acceleration(t) - gravity());
        let x = SystemState::new(nav, Vector3::zeros(), Vector3::zeros(), t);
        (x, a_s, self.angular_velocity(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Walls are the planes x = +-half_width and y = +-half_width.
    pub half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub landmark_count: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { half_width: 10.0, z_min: -3.0, z_max: 3.0, landmark_count: 230, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub landmarks: Vec<Vector3<f64>>,
    /// `(min, max)` corners of the room.
    pub bounds: (Vector3<f64>, Vector3<f64>),
}

/// Points uniformly distributed over the four walls.
pub fn generate_scene(cfg: &SceneConfig) -> Scene {
    let mut rng = sub_rng(cfg.seed, STREAM_SCENE);
    let w = cfg.half_width;
    let landmarks = (0..cfg.landmark_count)
        .map(|_| {
            let wall = rng.random_range(0..4);
            let s = rng.random_range(-w..w);
            let z = rng.random_range(cfg.z_min..cfg.z_max);
            match wall {
                0 => Vector3::new(w, s, z),
                1 => Vector3::new(-w, s, z),
                2 => Vector3::new(s, w, z),
                _ => Vector3::new(s, -w, z),
            }
        })
        .collect();
    Scene { landmarks, bounds: (Vector3::new(-w, -w, cfg.z_min), Vector3::new(w, w, cfg.z_max)) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub duration: f64,
    pub camera_rate: f64,
    pub torus: TorusTrajectory,
    pub scene: SceneConfig,
    /// Noise used to corrupt the IMU; zero entries are allowed.
    pub imu_noise: ImuNoiseConfig,
    pub camera: CameraModel,
    pub pixel_sigma: f64,
    pub max_range: f64,
    /// Per-frame probability that the tracker loses a feature.
    pub track_loss_prob: f64,
    pub bias0_sigma_g: f64,
    pub bias0_sigma_a: f64,
    /// Standard deviation of the velocity error of the initial estimate.
    pub init_velocity_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 60.0,
            camera_rate: 10.0,
            torus: TorusTrajectory::default(),
            scene: SceneConfig::default(),
            imu_noise: ImuNoiseConfig::default(),
            camera: CameraModel::default(),
            pixel_sigma: 1.0,
            max_range: 25.0,
            track_loss_prob: 0.13,
            bias0_sigma_g: 0.0,
            bias0_sigma_a: 0.0,
            init_velocity_sigma: 0.05,
        }
    }
}

impl SimConfig {
    /// The same experiment without any noise.
    pub fn noiseless(&self) -> Self {
        SimConfig {
            imu_noise: ImuNoiseConfig { sigma_g: 0.0, sigma_a: 0.0, sigma_bg: 0.0, sigma_ba: 0.0, ..self.imu_noise },
            pixel_sigma: 0.0,
            bias0_sigma_g: 0.0,
            bias0_sigma_a: 0.0,
            init_velocity_sigma: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let n = &self.imu_noise;
        let sig = [
            n.sigma_g,
            n.sigma_a,
            n.sigma_bg,
            n.sigma_ba,
            self.pixel_sigma,
            self.bias0_sigma_g,
            self.bias0_sigma_a,
            self.init_velocity_sigma,
        ];
        if sig.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("noise levels must be finite and nonnegative");
        }
        if !(self.duration >= 0.0) || !(self.camera_rate > 0.0) || !(n.rate > 0.0) {
            return bad("duration must be nonnegative and rates positive");
        }
        if !(self.scene.half_width > 0.0) || !(self.scene.z_max > self.scene.z_min) {
            return bad("scene walls must have positive extent");
        }
        if !(0.0..1.0).contains(&self.track_loss_prob) {
            return bad("track_loss_prob must lie in [0, 1)");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        self.camera.validate()
    }

    /// Rate of frames per IMU sample, which must be an integer.
    fn imu_per_frame(&self) -> usize {
        (self.imu_noise.rate / self.camera_rate).round() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub mean_speed: f64,
    pub mean_landmarks_per_frame: f64,
    pub mean_track_length: f64,
    pub tracks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStream {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameInput>,
    /// Truth at each frame, biases included.
    pub truth: Vec<SystemState>,
    /// Track id -> scene landmark index.
    pub track_landmarks: Vec<usize>,
    pub seed: u64,
    pub stats: SimStats,
}

/// IMU streams at `rate`: measured samples, the true samples without bias
/// or noise, and the bias at each sample.
pub struct ImuSynthesis {
    pub measured: Vec<ImuSample>,
    pub ideal: Vec<ImuSample>,
    pub biases: Vec<(Vector3<f64>, Vector3<f64>)>,
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Measurements `w + b_g + n_g`, `a_s + b_a + n_a` with white noise of
/// variance `sigma^2 f` and biases random-walking by `sigma_b^2 / f` per
/// sample.
pub fn synth_imu(
    traj: &TorusTrajectory,
    noise: &ImuNoiseConfig,
    duration: f64,
    bias0: (Vector3<f64>, Vector3<f64>),
    seed: u64,
) -> ImuSynthesis {
    let mut rng = sub_rng(seed, STREAM_IMU);
    let f = noise.rate;
    let n = (duration * f).round() as usize;
    let (sg, sa) = (noise.sigma_g * f.sqrt(), noise.sigma_a * f.sqrt());
    let (sbg, sba) = (noise.sigma_bg / f.sqrt(), noise.sigma_ba / f.sqrt());
    let (mut bg, mut ba) = bias0;
    let mut out = ImuSynthesis { measured: Vec::new(), ideal: Vec::new(), biases: Vec::new() };
    for k in 0..=n {
        let t = k as f64 / f;
        let (_, a_s, w) = traj.sample_truth(t);
        if k > 0 {
            bg += gaussian3(&mut rng, sbg);
            ba += gaussian3(&mut rng, sba);
        }
        let ng = gaussian3(&mut rng, sg);
        let na = gaussian3(&mut rng, sa);
        out.ideal.push(ImuSample { stamp: t, gyro: w, accel: a_s });
        out.measured.push(ImuSample { stamp: t, gyro: w + bg + ng, accel: a_s + ba + na });
        out.biases.push((bg, ba));
    }
    out
}

/// Truth at every frame, integrated from the analytic start state with the
/// ideal samples so that truth and the estimator's motion model agree.
pub fn truth_states(cfg: &SimConfig, imu: &ImuSynthesis) -> Result<Vec<SystemState>> {
    let step = cfg.imu_per_frame();
    let n_frames = (cfg.duration * cfg.camera_rate).round() as usize;
    let (mut x, _, _) = cfg.torus.sample_truth(0.0);
    let mut out = Vec::with_capacity(n_frames + 1);
    for k in 0..=n_frames {
        let t = k as f64 / cfg.camera_rate;
        if k > 0 {
            let lo = (k - 1) * step;
            x = integrate(&x, &imu.ideal[lo..=lo + step], t)?;
        }
        let (bg, ba) = imu.biases[k * step];
        out.push(SystemState { bias_g: bg, bias_a: ba, stamp: t, ..x });
    }
    Ok(out)
}

/// Visible landmarks of one frame as `(scene index, noisy pixel)`.
pub type RawFrame = Vec<(usize, Vector2<f64>)>;

/// A landmark is visible when it is in front of the camera, within range
/// and inside the image before noise is added.
pub fn synth_frames(
    scene: &Scene,
    truth: &[SystemState],
    cam: &CameraModel,
    pixel_sigma: f64,
    max_range: f64,
    seed: u64,
) -> Vec<RawFrame> {
    let mut rng = sub_rng(seed, STREAM_CAMERA);
    truth
        .iter()
        .map(|x| {
            let (c, r_wc) = cam.camera_in_world(&x.nav);
            let mut obs = Vec::new();
            for (id, p) in scene.landmarks.iter().enumerate() {
                let pc = r_wc.transpose() * (p - c);
                if !(pc.z > 1e-3) || pc.norm() > max_range {
                    continue;
                }
                let uv = cam.pixel(&pc);
                if !cam.in_bounds(&uv, 0.0) {
                    continue;
                }
                let noise: Vector2<f64> = if pixel_sigma > 0.0 {
                    Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                        * pixel_sigma
                } else {
                    Vector2::zeros()
                };
                obs.push((id, uv + noise));
            }
            obs
        })
        .collect()
}

/// Ground-truth association into track segments. A feature keeps its track
/// while continuously visible, unless the tracker loses it (probability
/// `loss_prob` per frame), in which case it restarts under a new id.
/// Returns the frames with track ids and the landmark of every track.
pub fn frontend_tracks(
    raw: &[RawFrame],
    stamps: &[f64],
    pixel_sigma: f64,
    loss_prob: f64,
    seed: u64,
) -> (Vec<FrameInput>, Vec<usize>) {
    let mut rng = sub_rng(seed, STREAM_TRACKER);
    let mut live: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut track_landmarks = Vec::new();
    let sigma = if pixel_sigma > 0.0 { pixel_sigma } else { 1.0 };
    let frames = raw
        .iter()
        .zip(stamps)
        .enumerate()
        .map(|(k, (obs, &stamp))| {
            let mut next = std::collections::HashMap::new();
            let observations = obs
                .iter()
                .map(|&(id, uv)| {
                    let keep = live.get(&id).copied().filter(|_| loss_prob == 0.0 || !rng.random_bool(loss_prob));
                    let track = keep.unwrap_or_else(|| {
                        track_landmarks.push(id);
                        track_landmarks.len() - 1
                    });
                    next.insert(id, track);
                    Observation { frame: k, landmark: track, uv, sigma }
                })
                .collect();
            live = next;
            FrameInput { stamp, observations }
        })
        .collect();
    (frames, track_landmarks)
}

/// Track lengths in frames.
pub fn track_lengths(frames: &[FrameInput], n_tracks: usize) -> Vec<usize> {
    let mut len = vec![0; n_tracks];
    for f in frames {
        for o in &f.observations {
            len[o.landmark] += 1;
        }
    }
    len
}

/// Simulates a whole session. A zero-duration session has no samples and
/// no frames.
pub fn generate_stream(cfg: &SimConfig, seed: u64) -> Result<SimStream> {
    cfg.validate()?;
    if cfg.duration == 0.0 {
        let empty = SimStream { imu: vec![], frames: vec![], truth: vec![], track_landmarks: vec![], seed, stats: SimStats::default() };
        return Ok(empty);
    }
    let scene = generate_scene(&cfg.scene);
    let mut b0 = sub_rng(seed, STREAM_BIAS0);
    let bias0 = (gaussian3(&mut b0, cfg.bias0_sigma_g), gaussian3(&mut b0, cfg.bias0_sigma_a));
    let imu = synth_imu(&cfg.torus, &cfg.imu_noise, cfg.duration, bias0, seed);
    let truth = truth_states(cfg, &imu)?;
    let raw = synth_frames(&scene, &truth, &cfg.camera, cfg.pixel_sigma, cfg.max_range, seed);
    let stamps: Vec<f64> = truth.iter().map(|x| x.stamp).collect();
    let (frames, track_landmarks) = frontend_tracks(&raw, &stamps, cfg.pixel_sigma, cfg.track_loss_prob, seed);

    let lengths = track_lengths(&frames, track_landmarks.len());
    let n_obs: usize = lengths.iter().sum();
    let mean_speed = if imu.ideal.len() > 1 {
        (0..imu.ideal.len()).map(|k| cfg.torus.velocity(imu.ideal[k].stamp).norm()).sum::<f64>() / imu.ideal.len() as f64
    } else {
        cfg.torus.velocity(0.0).norm()
    };
    let stats = SimStats {
        mean_speed,
        mean_landmarks_per_frame: if frames.is_empty() { 0.0 } else { n_obs as f64 / frames.len() as f64 },
        mean_track_length: if lengths.is_empty() { 0.0 } else { n_obs as f64 / lengths.len() as f64 },
        tracks: lengths.len(),
    };
    Ok(SimStream { imu: imu.measured, frames, truth, track_landmarks, seed, stats })
}

/// Initial estimate: the true pose and biases set to zero, with velocity
/// perturbed by `N(0, sigma^2 I)`.
pub fn initial_estimate(truth0: &SystemState, sigma: f64, seed: u64) -> SystemState {
    let mut rng = sub_rng(seed, STREAM_INIT);
    let dv = gaussian3(&mut rng, sigma);
    let nav = SE23::new(truth0.nav.r, truth0.nav.v + dv, truth0.nav.p);
    SystemState::new(nav, Vector3::zeros(), Vector3::zeros(), truth0.stamp)
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(",")
}

/// Writes `imu.csv`, `truth.csv`, `frames.csv` (frame, stamp) and one
/// `frames/NNNNNN.csv` per frame (track, u, v, sigma).
pub fn write_stream(stream: &SimStream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut imu = fs::File::create(dir.join("imu.csv"))?;
    writeln!(imu, "stamp,gx,gy,gz,ax,ay,az")?;
    for s in &stream.imu {
        writeln!(imu, "{}", join(&[s.stamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z]))?;
    }
    let mut truth = fs::File::create(dir.join("truth.csv"))?;
    writeln!(truth, "stamp,r00,r10,r20,r01,r11,r21,r02,r12,r22,vx,vy,vz,px,py,pz,bgx,bgy,bgz,bax,bay,baz")?;
    for x in &stream.truth {
        let mut row = vec![x.stamp];
        row.extend(x.nav.r.matrix().iter());
        row.extend(x.nav.v.iter());
        row.extend(x.nav.p.iter());
        row.extend(x.bias_g.iter());
        row.extend(x.bias_a.iter());
        writeln!(truth, "{}", join(&row))?;
    }
    let mut index = fs::File::create(dir.join("frames.csv"))?;
    writeln!(index, "frame,stamp")?;
    for (k, f) in stream.frames.iter().enumerate() {
        writeln!(index, "{k},{}", fmt(f.stamp))?;
        let mut out = fs::File::create(dir.join("frames").join(format!("{k:06}.csv")))?;
        writeln!(out, "track,u,v,sigma")?;
        for o in &f.observations {
            writeln!(out, "{},{}", o.landmark, join(&[o.uv.x, o.uv.y, o.sigma]))?;
        }
    }
    let mut tracks = fs::File::create(dir.join("tracks.csv"))?;
    writeln!(tracks, "track,landmark")?;
    for (t, l) in stream.track_landmarks.iter().enumerate() {
        writeln!(tracks, "{t},{l}")?;
    }
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    rdr.records()
        .map(|r| {
            r.map(|r| r.iter().map(str::to_string).collect())
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Io(format!("{}: bad number {s:?}", path.display())))
}

fn floats(row: &[String], n: usize, path: &Path) -> Result<Vec<f64>> {
    if row.len() != n {
        return Err(Error::Io(format!("{}: expected {n} columns, found {}", path.display(), row.len())));
    }
    row.iter().map(|s| num(s, path)).collect()
}

/// Reads a directory written by [`write_stream`]. Stats are recomputed.
pub fn read_stream(dir: &Path, seed: u64) -> Result<SimStream> {
    let p = dir.join("imu.csv");
    let imu = read_rows(&p)?
        .iter()
        .map(|r| {
            let v = floats(r, 7, &p)?;
            Ok(ImuSample { stamp: v[0], gyro: Vector3::new(v[1], v[2], v[3]), accel: Vector3::new(v[4], v[5], v[6]) })
        })
        .collect::<Result<Vec<_>>>()?;
    let p = dir.join("truth.csv");
    let truth = read_rows(&p)?
        .iter()
        .map(|r| {
            let v = floats(r, 22, &p)?;
            let nav = SE23::new(
                Rot3::from_matrix_unchecked(Matrix3::from_column_slice(&v[1..10])),
                Vector3::new(v[10], v[11], v[12]),
                Vector3::new(v[13], v[14], v[15]),
            );
            Ok(SystemState::new(nav, Vector3::new(v[16], v[17], v[18]), Vector3::new(v[19], v[20], v[21]), v[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = dir.join("frames.csv");
    let mut frames = Vec::new();
    for r in read_rows(&p)? {
        if r.len() != 2 {
            return Err(Error::Io(format!("{}: expected 2 columns", p.display())));
        }
        let k: usize = num(&r[0], &p)?;
        let stamp: f64 = num(&r[1], &p)?;
        let fp = dir.join("frames").join(format!("{k:06}.csv"));
        let observations = read_rows(&fp)?
            .iter()
            .map(|r| {
                if r.len() != 4 {
                    return Err(Error::Io(format!("{}: expected 4 columns", fp.display())));
                }
                Ok(Observation {
                    frame: k,
                    landmark: num(&r[0], &fp)?,
                    uv: Vector2::new(num(&r[1], &fp)?, num(&r[2], &fp)?),
                    sigma: num(&r[3], &fp)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameInput { stamp, observations });
    }
    let p = dir.join("tracks.csv");
    let track_landmarks = read_rows(&p)?
        .iter()
        .map(|r| num::<usize>(r.get(1).map(String::as_str).unwrap_or(""), &p))
        .collect::<Result<Vec<_>>>()?;
    let lengths = track_lengths(&frames, track_landmarks.len());
    let n_obs: usize = lengths.iter().sum();
    let stats = SimStats {
        mean_speed: 0.0,
        mean_landmarks_per_frame: if frames.is_empty() { 0.0 } else { n_obs as f64 / frames.len() as f64 },
        mean_track_length: if lengths.is_empty() { 0.0 } else { n_obs as f64 / lengths.len() as f64 },
        tracks: lengths.len(),
    };
    Ok(SimStream { imu, frames, truth, track_landmarks, seed, stats })
}
