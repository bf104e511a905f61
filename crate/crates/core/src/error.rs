use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid rates p={p}, q={q}: need 0 <= q < p <= 1 and p + q = 1")]
    InvalidRates { p: f64, q: f64 },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("density {0} outside [0, 1]")]
    DensityOutOfRange(f64),

    #[error("negative time {0}")]
    NegativeTime(f64),

    #[error("profile has {profile} sites but topology has {topology}")]
    SizeMismatch { profile: usize, topology: usize },

    #[error("site {site} is not part of the topology")]
    SiteOutOfRange { site: i64 },

    #[error("window too small: {0}")]
    WindowTooSmall(String),

    #[error("degenerate reduced window ({a}, {b})")]
    DegenerateWindow { a: i64, b: i64 },

    #[error("layer order violated: {0}")]
    OrderViolation(String),

    #[error("invalid initial data: {0}")]
    InvalidInitialData(String),

    #[error("boundary contamination: {0}")]
    BoundaryContamination(String),

    #[error("too few replicas: {0}")]
    TooFewReplicas(String),

    #[error("state space guard exceeded: {states} states (limit {limit})")]
    StateGuard { states: usize, limit: usize },

    #[error("invalid environment schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
