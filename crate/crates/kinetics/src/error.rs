use thiserror::Error;

/// Errors surfaced by the solver library.
#[derive(Debug, Error)]
pub enum KineticsError {
    /// A physical-space point lies outside the annular gap.
    #[error("point at radius {radius} is outside the annulus [{r_inner}, 1]")]
    OutsideAnnulus { radius: f64, r_inner: f64 },

    /// A characteristic query was made for a grazing velocity at a wall,
    /// where the trajectory never leaves the boundary.
    #[error("grazing trajectory at wall (eta={eta}, v_eta={v_eta}): no interior history")]
    GrazingAtWall { eta: f64, v_eta: f64 },

    /// A radial position beyond the turning point was requested on a
    /// characteristic branch that never reaches it.
    #[error("radial position {x} is not reachable on the requested characteristic branch")]
    UnreachablePosition { x: f64 },

    /// Configuration failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A dense linear-algebra kernel failed (singular or unusable system).
    #[error("numerical failure: {0}")]
    Numerics(String),

    /// An iterative stage stopped without meeting its tolerance.
    #[error("{stage} failed to converge: residual {residual} after {iterations} iterations (tol {tol})")]
    NotConverged {
        stage: String,
        residual: f64,
        iterations: usize,
        tol: f64,
    },

    /// The exponential decay fit could not be performed on the recorded history.
    #[error("decay fit failed: {0}")]
    FitFailed(String),

    /// Input/output failure while reading or writing run artifacts.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Artifact parse failure.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
}

impl KineticsError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        KineticsError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        KineticsError::Parse { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, KineticsError>;
