use thiserror::Error;

/// Errors raised across the estimator, simulator and evaluation code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },

    #[error("IMU sample window is empty")]
    EmptySampleWindow,

    #[error("IMU sample stamps are not strictly increasing at index {index}")]
    NonMonotoneStamps { index: usize },

    #[error("frame stamp {stamp} does not follow latest stamp {latest}")]
    NonMonotoneStamp { stamp: f64, latest: f64 },

    #[error("IMU samples cover [{first}, {last}] but [{start}, {end}] is required")]
    MissingImuCoverage {
        first: f64,
        last: f64,
        start: f64,
        end: f64,
    },

    #[error("covariance is numerically singular (min eigenvalue {min_eigenvalue:e})")]
    SingularCovariance { min_eigenvalue: f64 },

    #[error("point depth {depth:e} is not in front of the camera")]
    BehindCamera { depth: f64 },

    #[error("bearing angle {angle_deg:.4} deg is below the admission gate")]
    LowDisparity { angle_deg: f64 },

    #[error("normal equations stayed indefinite after {escalations} damping escalations")]
    IndefiniteNormalEquations { escalations: usize },

    #[error("optimization diverged: cost {cost:e} after {previous:e}")]
    DivergedStep { cost: f64, previous: f64 },

    #[error("no variable is older than the marginalization time {t_m}")]
    NothingToMarginalize { t_m: f64 },

    #[error("no successful trials to aggregate")]
    NoSuccessfulTrials,

    #[error("curve spans {span} s, shorter than the {window} s window")]
    CurveTooShort { span: f64, window: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
