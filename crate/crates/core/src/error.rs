use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected n = {expected}, found n = {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid coordinate vector of length {0} (need 2n + 1 with n >= 1)")]
    BadCoordinateLength(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("evaluation at gauge distance {distance:e} from the singularity (guard {guard:e})")]
    Singularity { distance: f64, guard: f64 },

    #[error("origin is not inside the domain (phi(origin) = {0})")]
    OriginOutside(f64),

    #[error("inner domain is not compactly contained in the outer one (max outer phi on inner boundary = {0})")]
    NotNested(f64),

    #[error("ray {index} from the anchor did not bracket a unique boundary crossing ({crossings} sign changes)")]
    RayBracket { index: usize, crossings: usize },

    #[error("gauge-ball probe prerequisite not met: {0}")]
    ProbeNotPassed(String),

    #[error("grid resolution {0} too small (need at least {1} nodes per axis)")]
    ResolutionTooSmall(usize, usize),

    #[error("grid solver supports n = 1 only (got n = {0})")]
    UnsupportedDimension(usize),

    #[error("outer domain reaches the grid boundary")]
    DomainTouchesGridBoundary,

    #[error("no free nodes between the two boundaries")]
    NoFreeNodes,

    #[error("node {0} is not a free node")]
    NotFree(usize),

    #[error("solver did not converge: residual {:e} after {} iterations", .0.report.final_residual, .0.report.iterations)]
    NotConverged(Box<crate::solver::PartialSolve>),

    #[error("point lies outside the sampled grid")]
    OutOfGrid,

    #[error("no certified nodes with margin {0}")]
    NoCertifiedNodes(usize),

    #[error("level {0} is not crossed inside the certified region")]
    EmptySurface(f64),

    #[error("field and grid are incompatible: {0}")]
    GridMismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
