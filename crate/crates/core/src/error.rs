use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can surface. [`Error::class`] gives the
/// stable name used on the CLI diagnostic stream.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("steady state is not an equilibrium: machine {machine} residual {residual:.3e} exceeds {tolerance:.1e}")]
    Equilibrium {
        machine: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite state after step at t = {t}")]
    NonFinite { t: f64 },

    #[error("trajectory did not converge; Lyapunov estimate is undefined")]
    NotConverged,

    #[error("every trajectory state lies below the norm floor {floor:.1e}")]
    DegenerateTrajectory { floor: f64 },

    #[error("linearization at the origin is not Hurwitz (max real part {max_real:.3e})")]
    NotHurwitz { max_real: f64 },

    #[error("kernel matrix factorization failed even with jitter {jitter:.1e}")]
    Factorization { jitter: f64 },

    #[error("exclusions cover every candidate in the sampling domain")]
    EmptyDomain,

    #[error("found only {found} of {target} stable points within {iterations} iterations")]
    BudgetExhausted {
        found: usize,
        target: usize,
        iterations: usize,
    },

    #[error("certified region is void: C_lambda = {c_lambda:.4} <= 0 (lambda = {lambda:.4})")]
    CertificateVoid { c_lambda: f64, lambda: f64 },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Parse(_) => "ParseError",
            Error::Io { .. } => "ParseError",
            Error::Equilibrium { .. } => "EquilibriumError",
            Error::Topology(_) => "TopologyError",
            Error::Dimension { .. } => "DimensionError",
            Error::Index(_) => "IndexError",
            Error::NonFinite { .. } => "NonFiniteError",
            Error::NotConverged => "NotConvergedError",
            Error::DegenerateTrajectory { .. } => "DegenerateTrajectoryError",
            Error::NotHurwitz { .. } => "NotHurwitzError",
            Error::Factorization { .. } => "FactorizationError",
            Error::EmptyDomain => "EmptyDomainError",
            Error::BudgetExhausted { .. } => "BudgetExhaustedError",
            Error::CertificateVoid { .. } => "CertificateVoidError",
            Error::Consistency(_) => "ConsistencyError",
            Error::InvalidArgument(_) => "InvalidArgumentError",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
