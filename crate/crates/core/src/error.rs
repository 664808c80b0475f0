use thiserror::Error;

use crate::control::TrajectoryLog;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of a physical model.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates a type invariant. `key` is the dotted path.
    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("tracking lost at t = {time:.1} s: particle left the field of view")]
    TrackingLost { time: f64, log: Box<TrajectoryLog> },

    #[error("waypoint timeout: waypoint {index} not reached within {timeout} s")]
    WaypointTimeout { index: usize, timeout: f64, log: Box<TrajectoryLog> },

    #[error("insufficient counts at spectrum point {index}")]
    InsufficientCounts { index: usize },

    #[error("unresolved spectrum: {0}")]
    UnresolvedSpectrum(String),

    #[error("fit did not converge after {iterations} iterations ({diagnostics})")]
    FitNotConverged { iterations: usize, diagnostics: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("height check failed: equilibrium height {actual_um:.3} µm differs from planned {planned_um:.3} µm")]
    HeightMismatch { planned_um: f64, actual_um: f64 },

    #[error("output error: {0}")]
    Output(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Domain(_))
    }
}
