use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestamps not strictly increasing (t={0})")]
    NonMonotoneTime(f64),

    #[error("empty measurement stream")]
    EmptyStream,

    #[error("singular ranging jacobian: state coincides with anchor")]
    SingularRangeJacobian,

    #[error("marginalization failed: {0}")]
    Marginalization(String),

    #[error("solver diverged: damping exceeded {0:.1e}")]
    SolverDiverged(f64),

    #[error("anchor not fixed yet")]
    AnchorNotReady,

    #[error("inconsistent range measurements: no transform satisfies them")]
    InconsistentMeasurements,

    #[error("ambiguous geometry: both candidate intersections consistent")]
    AmbiguousGeometry,

    #[error("degenerate motion: zero baseline between rendezvous observations")]
    DegenerateMotion,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
