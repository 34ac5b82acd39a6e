use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rifls::state::ErrorFormulation;
use rifls::smoother::{InitialPrior, SmootherConfig};
use rifls_cli::{cmd_audit, cmd_montecarlo, cmd_run, cmd_simulate, CliError, ExperimentConfig, Manifest, MethodEntry};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rifls"))
}

fn short(duration: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.sim.duration = duration;
    c
}

/// Methods without an initial prior, so the audit sees the bare gauge.
fn free(name: &str, f: ErrorFormulation, fej: bool) -> MethodEntry {
    MethodEntry {
        name: name.into(),
        preset: None,
        smoother: Some(SmootherConfig { formulation: f, fej, ..SmootherConfig::default() }),
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join("experiment.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn dir_contents(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| headers.iter().zip(r.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = short(12.5);
    cfg.methods.push(MethodEntry {
        name: "custom".into(),
        preset: None,
        smoother: Some(SmootherConfig {
            horizon: 0.7,
            fej: true,
            formulation: ErrorFormulation::Traditional,
            initial_prior: Some(InitialPrior { sigma_p: 0.123456789, ..InitialPrior::default() }),
            ..SmootherConfig::default()
        }),
    });
    cfg.methods.push(MethodEntry { name: "smart".into(), preset: Some("ri-fls-smart".into()), smoother: None });
    cfg.sim.torus.omega_minor = 0.1 + 0.2;
    cfg.imu_noise.sigma_g = 1.0 / 3.0;
    for c in [ExperimentConfig::default(), cfg] {
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "n_trial = 3\n",
        "[sim]\nduraton = 3.0\n",
        "[sim.torus]\nmajor_radius = 5.0\nmajor = 1.0\n",
        "[imu_noise]\nsigma_g = 1e-3\nsigma_a = 1e-2\nsigma_bg = 1e-5\nsigma_ba = 1e-4\nrate = 100.0\nsigma_x = 1.0\n",
        "[[methods]]\nname = \"ri-fls\"\nhorizn = 1.0\n",
        "[[methods]]\nname = \"m\"\n[methods.smoother]\nhorizon = 1.0\nfe = true\n",
    ] {
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(matches!(err, CliError::InvalidConfig(_)), "{text}: {err}");
    }
    assert!(ExperimentConfig::from_toml("n_trials = 3\n[sim]\nduration = 3.0\n").is_ok());
}

#[test]
fn invalid_values_are_rejected() {
    for text in [
        "n_trials = 0\n",
        "[[methods]]\nname = \"no-such-preset\"\n",
        "[[methods]]\nname = \"a\"\npreset = \"ri-fls\"\n[methods.smoother]\nhorizon = 1.0\n",
        "[sim]\nduration = -1.0\n",
        "[imu_noise]\nsigma_g = 0.0\nsigma_a = 1e-2\nsigma_bg = 1e-5\nsigma_ba = 1e-4\nrate = 100.0\n",
        "[[methods]]\nname = \"ri-fls\"\n[[methods]]\nname = \"ri-fls\"\n",
    ] {
        assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::InvalidConfig(_))), "{text}");
    }
}

#[test]
fn hash_changes_iff_config_changes() {
    let base = ExperimentConfig::default();
    let h = base.hash();
    // Same content written differently hashes the same.
    let spelled = "# comment\nseed0 = 2024\nn_trials = 25\n\n[sim]\nduration = 60.0\n";
    assert_eq!(ExperimentConfig::from_toml(spelled).unwrap().hash(), h);
    assert_eq!(ExperimentConfig::from_toml(&base.to_toml().unwrap()).unwrap().hash(), h);

    let mutations: Vec<(&str, Box<dyn Fn(&mut ExperimentConfig)>)> = vec![
        ("duration", Box::new(|c| c.sim.duration += 1.0)),
        ("camera_rate", Box::new(|c| c.sim.camera_rate = 20.0)),
        ("torus", Box::new(|c| c.sim.torus.major_radius += 1e-9)),
        ("scene seed", Box::new(|c| c.sim.scene.seed += 1)),
        ("landmarks", Box::new(|c| c.sim.scene.landmark_count += 1)),
        ("sim noise", Box::new(|c| c.sim.imu_noise.sigma_ba *= 2.0)),
        ("camera", Box::new(|c| c.sim.camera.fx += 1.0)),
        ("pixel sigma", Box::new(|c| c.sim.pixel_sigma = 0.5)),
        ("track loss", Box::new(|c| c.sim.track_loss_prob = 0.2)),
        ("init sigma", Box::new(|c| c.sim.init_velocity_sigma = 0.1)),
        ("model noise", Box::new(|c| c.imu_noise.sigma_g *= 1.5)),
        ("method order", Box::new(|c| c.methods.swap(0, 1))),
        ("method added", Box::new(|c| c.methods.push(MethodEntry::named("ri-fls-smart")))),
        ("method preset", Box::new(|c| c.methods[0].preset = Some("ri-fls-exact".into()))),
        ("n_trials", Box::new(|c| c.n_trials = 3)),
        ("seed0", Box::new(|c| c.seed0 = 1)),
        ("out", Box::new(|c| c.out = "elsewhere".into())),
        ("window", Box::new(|c| c.window = 5.0)),
    ];
    for (name, m) in &mutations {
        let mut c = base.clone();
        m(&mut c);
        assert_ne!(c.hash(), h, "{name}");
    }
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &short(2.0));
    for out in ["a", "b"] {
        let status = bin()
            .args(["simulate", "--config"])
            .arg(&cfg)
            .args(["--seed", "17", "--out"])
            .arg(tmp.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = dir_contents(&tmp.path().join("a"));
    assert!(a.len() > 20);
    assert_eq!(a, dir_contents(&tmp.path().join("b")));
    let m = Manifest::read(&tmp.path().join("a")).unwrap();
    assert_eq!((m.seed, m.version.as_str()), (17, env!("CARGO_PKG_VERSION")));
    assert_eq!(m.config_hash, m.config.hash());
}

#[test]
fn zero_duration_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short(0.0);
    cmd_simulate(&cfg, 3, tmp.path()).unwrap();
    let m = Manifest::read(tmp.path()).unwrap();
    assert_eq!(m.config, cfg);
    for f in ["imu.csv", "truth.csv", "frames.csv", "tracks.csv"] {
        assert!(csv_rows(&tmp.path().join(f)).is_empty(), "{f}");
    }
    assert_eq!(fs::read_dir(tmp.path().join("frames")).unwrap().count(), 0);
}

#[test]
fn noiseless_run_from_truth_has_near_zero_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = short(3.0);
    cfg.sim = cfg.sim.noiseless();
    cmd_simulate(&cfg, 5, &tmp.path().join("s")).unwrap();
    let s = cmd_run(&tmp.path().join("s"), None, "ri-fls", &tmp.path().join("r"), 1).unwrap();
    assert_eq!(s.frames, 31);
    let log = csv_rows(&tmp.path().join("r").join("log.csv"));
    assert_eq!(log.len(), 31);
    for row in &log {
        assert!(num(row, "cost") < 1e-10, "{row:?}");
        assert!(num(row, "position_error") < 1e-6, "{row:?}");
    }
    let session = fs::read_to_string(tmp.path().join("r").join("session.jsonl")).unwrap();
    assert_eq!(session.lines().count(), 31);
    let m = Manifest::read(&tmp.path().join("r")).unwrap();
    assert_eq!(m.method.as_deref(), Some("ri-fls"));
    assert_eq!(m.input_hash, Some(cfg.hash()));
}

#[test]
fn exit_codes_are_distinct() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |c: &mut Command| c.output().unwrap().status.code().unwrap();

    let missing = tmp.path().join("missing.toml");
    assert_eq!(code(bin().args(["simulate", "--config"]).arg(&missing)), 4);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "n_trails = 3\n").unwrap();
    assert_eq!(code(bin().args(["montecarlo", "--config"]).arg(&bad)), 3);

    let cfg = write_config(tmp.path(), &short(1.0));
    let stream = tmp.path().join("stream");
    assert_eq!(code(bin().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&stream)), 0);
    assert_eq!(code(bin().arg("run").arg(&stream).args(["--method", "no-such-method"])), 3);
    assert_eq!(code(bin().args(["run", "--bogus-flag"])), 2);

    // A corrupted accelerometer burst makes the session blow up.
    let imu = stream.join("imu.csv");
    let text = fs::read_to_string(&imu).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for l in lines.iter_mut().skip(40).take(10) {
        let mut cols: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
        cols[4] += 1e4;
        cols[2] += 50.0;
        *l = cols.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",");
    }
    fs::write(&imu, lines.join("\n") + "\n").unwrap();
    let out = bin().arg("run").arg(&stream).args(["--out"]).arg(tmp.path().join("run")).output().unwrap();
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("run").join("log.csv").exists());
}

#[test]
fn audit_shows_nullity_and_the_traditional_rotation_spike() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = short(4.0);
    cfg.methods = vec![
        free("ri-free", ErrorFormulation::RightInvariant, false),
        free("trad-free", ErrorFormulation::Traditional, false),
    ];
    cmd_simulate(&cfg, 8, &tmp.path().join("s")).unwrap();
    for method in ["ri-free", "trad-free"] {
        let run = tmp.path().join(method);
        cmd_run(&tmp.path().join("s"), None, method, &run, 1).unwrap();
        let n = cmd_audit(&run.join("trace.jsonl"), &run.join("audit.csv")).unwrap();
        assert_eq!(n, 41);
        let rows = csv_rows(&run.join("audit.csv"));
        let (pre, post): (Vec<_>, Vec<_>) = rows.iter().partition(|r| num(r, "marginalizations") == 0.0);
        assert!(pre.len() >= 9 && post.len() >= 20, "{} {}", pre.len(), post.len());
        let d = |r: &BTreeMap<String, String>, k: &str| num(r, &format!("defect_{k}"));
        for r in &pre {
            for k in ["yaw", "tx", "ty", "tz"] {
                assert!(d(r, k) < 1e-8, "{method} {r:?}");
            }
        }
        for r in &post {
            let t = d(r, "tx").max(d(r, "ty")).max(d(r, "tz"));
            assert!(t < 1e-6, "{method} {r:?}");
            if method == "trad-free" {
                assert!(d(r, "yaw") > 100.0 * t, "{r:?}");
            } else {
                assert!(d(r, "yaw") < 1e-6, "{r:?}");
            }
        }
    }

    // Auditing is pure: a copy of the input gives byte-identical output.
    let run = tmp.path().join("trad-free");
    fs::copy(run.join("trace.jsonl"), tmp.path().join("copy.jsonl")).unwrap();
    cmd_audit(&tmp.path().join("copy.jsonl"), &tmp.path().join("copy.csv")).unwrap();
    assert_eq!(fs::read(run.join("audit.csv")).unwrap(), fs::read(tmp.path().join("copy.csv")).unwrap());

    let status = bin().arg("audit").arg(run.join("trace.jsonl")).arg("--out").arg(tmp.path().join("bin.csv")).status().unwrap();
    assert!(status.success());
    assert_eq!(fs::read(run.join("audit.csv")).unwrap(), fs::read(tmp.path().join("bin.csv")).unwrap());
}

#[test]
fn montecarlo_smoke_run_is_fast_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = short(12.0);
    cfg.n_trials = 1;
    cfg.methods = vec![MethodEntry::named("ri-fls"), MethodEntry::named("fls-traditional")];
    let start = Instant::now();
    let report = cmd_montecarlo(&cfg, &tmp.path().join("a")).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0, "{:?}", start.elapsed());
    assert_eq!(report.methods.len(), 2);
    let summary = csv_rows(&tmp.path().join("a").join("summary.csv"));
    assert_eq!(summary.iter().map(|r| r["method"].as_str()).collect::<Vec<_>>(), ["ri-fls", "fls-traditional"]);
    for r in &summary {
        assert_eq!((num(r, "n_s"), num(r, "n_trials")), (1.0, 1.0));
    }
    assert_eq!(fs::read_dir(tmp.path().join("a").join("trials")).unwrap().count(), 2);

    let cfg_path = write_config(tmp.path(), &cfg);
    let out = bin().args(["montecarlo", "--config"]).arg(&cfg_path).arg("--out").arg(tmp.path().join("b")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("fls-traditional"));
    for f in ["summary.csv", "curves.csv"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ri_fls_succeeds_on_default_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let mut ok = 0;
    for seed in 0..10u64 {
        let s = tmp.path().join(format!("s{seed}"));
        cmd_simulate(&cfg, seed, &s).unwrap();
        match cmd_run(&s, None, "ri-fls", &tmp.path().join(format!("r{seed}")), 100) {
            Ok(r) if r.final_position_error <= 100.0 => ok += 1,
            Ok(r) => eprintln!("seed {seed}: final position error {}", r.final_position_error),
            Err(e) => eprintln!("seed {seed}: {e}"),
        }
        fs::remove_dir_all(&s).unwrap();
    }
    assert!(ok >= 9, "{ok}/10 sessions succeeded");
}
