//! Monocular visual-inertial fixed-lag smoothing on SE_2(3) with
//! traditional and right-invariant error states, plus the simulator,
//! observability audit and Monte-Carlo evaluation used to compare them.

pub mod error;
pub mod lie;
pub mod state;
pub mod imu;
pub mod vision;
pub mod linear;
pub mod smoother;
pub mod observability;
pub mod sim;
pub mod eval;

pub use error::{Error, Result};
