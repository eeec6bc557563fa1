use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// `code()` and `module()` give the stable identifiers used in the CLI's
/// machine-readable error output.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("singular system (pivot magnitude estimate {pivot:.3e})")]
    SingularSystem { pivot: f64 },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("grid is not symmetric under the declared reflections: {0}")]
    NonSymmetricGrid(String),
    #[error("degenerate parameter: {0}")]
    DegenerateParameter(String),
    #[error("no bound state: {0}")]
    NoBoundState(String),
    #[error("eigenvalue {mu0} is not simple: next eigenvalue {neighbor} is within tolerance")]
    NonSimple {
        mu0: num_complex::Complex64,
        neighbor: num_complex::Complex64,
    },
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("left/right eigenvectors nearly orthogonal (|<psi0, psi0*>| = {overlap:.3e})")]
    DefectivePair { overlap: f64 },
    #[error("eigenvalue {mu} is not real")]
    NonRealEigenvalue { mu: num_complex::Complex64 },
    #[error("nonlinearity is not homogeneous")]
    NotHomogeneous,
    #[error("nonlinearity does not fit the grid: {0}")]
    KindGridMismatch(String),
    #[error("right-hand side is inconsistent with the bordered system (residual {residual:.3e})")]
    InconsistentRhs { residual: f64 },
    #[error("{loop_name} iteration is not contracting (ratio {ratio:.4} at step {iteration})")]
    NoContraction {
        loop_name: &'static str,
        ratio: f64,
        iteration: usize,
    },
    #[error("{loop_name} iteration hit the limit of {iterations} steps")]
    MaxIterations {
        loop_name: &'static str,
        iterations: usize,
    },
    #[error("residual check failed: {residual:.3e} > {bound:.3e}")]
    ResidualCheckFailed { residual: f64, bound: f64 },
    #[error("Newton iteration diverged after {iterations} steps (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("continuation step underflow at parameter {param} (step {step:.3e})")]
    StepUnderflow { param: f64, step: f64 },
    #[error("branch switching failed: {0}")]
    SwitchFailed(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::GridMismatch(_) => "GridMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::SingularSystem { .. } => "SingularSystem",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::UnknownModel(_) => "UnknownModel",
            Error::NonSymmetricGrid(_) => "NonSymmetricGrid",
            Error::DegenerateParameter(_) => "DegenerateParameter",
            Error::NoBoundState(_) => "NoBoundState",
            Error::NonSimple { .. } => "NonSimple",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::DefectivePair { .. } => "DefectivePair",
            Error::NonRealEigenvalue { .. } => "NonRealEigenvalue",
            Error::NotHomogeneous => "NotHomogeneous",
            Error::KindGridMismatch(_) => "KindGridMismatch",
            Error::InconsistentRhs { .. } => "InconsistentRHS",
            Error::NoContraction { .. } => "NoContraction",
            Error::MaxIterations { .. } => "MaxIterations",
            Error::ResidualCheckFailed { .. } => "ResidualCheckFailed",
            Error::NewtonDiverged { .. } => "NewtonDiverged",
            Error::StepUnderflow { .. } => "StepUnderflow",
            Error::SwitchFailed(_) => "SwitchFailed",
            Error::Unsupported(_) => "Unsupported",
        }
    }

    pub fn module(&self) -> &'static str {
        match self {
            Error::GridMismatch(_)
            | Error::DimensionMismatch { .. }
            | Error::SingularSystem { .. } => "core",
            Error::InvalidSpec(_)
            | Error::UnknownModel(_)
            | Error::NonSymmetricGrid(_)
            | Error::DegenerateParameter(_)
            | Error::NoBoundState(_) => "models",
            Error::NonSimple { .. }
            | Error::NoConvergence { .. }
            | Error::DefectivePair { .. }
            | Error::NonRealEigenvalue { .. } => "spectra",
            Error::NotHomogeneous | Error::KindGridMismatch(_) => "nonlinearity",
            Error::InconsistentRhs { .. }
            | Error::NoContraction { .. }
            | Error::MaxIterations { .. }
            | Error::ResidualCheckFailed { .. } => "ls_solver",
            Error::NewtonDiverged { .. }
            | Error::StepUnderflow { .. }
            | Error::SwitchFailed(_)
            | Error::Unsupported(_) => "continuation",
        }
    }

    /// True for failures caused by the numerics rather than by the input.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::InvalidSpec(_)
                | Error::UnknownModel(_)
                | Error::NonSymmetricGrid(_)
                | Error::DegenerateParameter(_)
                | Error::GridMismatch(_)
                | Error::DimensionMismatch { .. }
                | Error::KindGridMismatch(_)
                | Error::Unsupported(_)
        )
    }
}
