use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid has {0} points, at least 4 are required")]
    GridTooSmall(usize),
    #[error("number of basis functions K = {k} outside [4, {max}]")]
    BadK { k: usize, max: usize },
    #[error("evaluation grid is not strictly increasing at index {0}")]
    NonIncreasingGrid(usize),
    #[error("point {0} lies outside the basis domain [{1}, {2}]")]
    OutOfDomain(f64, f64, f64),

    #[error("{states}^{points} state vectors exceed the enumeration cap {cap}")]
    EnumerationTooLarge { states: usize, points: usize, cap: u64 },
    #[error("specification mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("x disagrees across replicates at point {point} (replicate {replicate})")]
    XInconsistent { point: usize, replicate: usize },
    #[error("malformed input at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("bad initial parameters: {0}")]
    BadInit(String),

    #[error("replicate {0} has zero likelihood under every state vector")]
    DegenerateLikelihood(usize),
    #[error("covariance matrix is not positive definite")]
    NotSpd,
    #[error("residual variance estimate {0} is not positive")]
    NonPositiveSigma(f64),
    #[error("linear system is singular")]
    SingularSystem,
    #[error("Newton iteration failed to improve the objective")]
    NewtonDiverged,
    #[error("objective decreased from {previous} to {current} at iteration {iteration}")]
    MonotonicityViolation {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("information matrix is singular")]
    SingularInformation,
    #[error("parameter {name} = {value} is on the boundary of its space")]
    BoundaryParameter { name: String, value: f64 },
    #[error("{0}")]
    Unsupported(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    /// Numerical failures map to CLI exit code 3, everything else to 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateLikelihood(_)
                | Error::NotSpd
                | Error::NonPositiveSigma(_)
                | Error::SingularSystem
                | Error::NewtonDiverged
                | Error::MonotonicityViolation { .. }
                | Error::SingularInformation
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
