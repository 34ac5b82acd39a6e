use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyrifls::pyrifls;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    pyo3::append_to_inittab!(pyrifls);
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("rf", py.import("pyrifls").unwrap()).unwrap();
        f(py, &globals);
    });
}

fn run(py: Python<'_>, globals: &Bound<'_, PyDict>, code: &std::ffi::CStr) {
    if let Err(e) = py.run(code, Some(globals), None) {
        e.print(py);
        panic!("python snippet failed");
    }
}

#[test]
fn bindings_round_trip_and_run() {
    with_module(|py, g| {
        run(
            py,
            g,
            cr#"
w = [0.4, -0.1, 0.2]
assert max(abs(a - b) for a, b in zip(rf.so3_log(rf.so3_exp(w)), w)) < 1e-12
x = rf.SystemState(rf.so3_exp(w), [0.5, 0.0, 0.1], [1.0, 2.0, 3.0], stamp=2.0)
dx = [0.02] * 15
back = x.retract(dx, "ri").error(x, "ri")
assert max(abs(a - b) for a, b in zip(back, dx)) < 1e-9
try:
    x.error(x, "left-invariant")
    raise AssertionError("bad formulation accepted")
except ValueError:
    pass
s = rf.simulate(duration=2.0, seed=3, noiseless=True)
r = rf.run_session(s, "fls-traditional")
assert not r.failed and len(r) == s.n_frames
assert max(r.position_errors) < 1e-6
assert r.estimates[-1].stamp == s.frame_stamps[-1]
"#,
        );
    });
}
