use thiserror::Error;

/// Failures shared by every module of the crate.
#[derive(Debug, Clone, Error)]
pub enum GeomError {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("metric not positive at grid point {index} (coords {coords:?}): smallest eigenvalue {eigenvalue:e}")]
    NonPositive {
        index: usize,
        coords: Vec<f64>,
        eigenvalue: f64,
    },

    #[error("degenerate vertical metric at grid point {index}: det = {det:e}")]
    DegenerateVertical { index: usize, det: f64 },

    #[error("iterative solve failed after {iterations} iterations (final relative residual {final_residual:e})")]
    IterativeSolveFailure {
        iterations: usize,
        final_residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("eigensolver did not converge within {iterations} iterations (last change {last_change:e})")]
    EigenNonConvergence { iterations: usize, last_change: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Richardson extrapolation diverged: {0}")]
    ExtrapolationDivergence(String),

    #[error("stencil leaves the upper half-plane at base offset {offset:?} (Im tau = {im_tau:e})")]
    StencilOutsideUpperHalfPlane { offset: Vec<f64>, im_tau: f64 },

    #[error("Newton did not converge within {iterations} iterations (residuals {residuals:?})")]
    MaxIterations { iterations: usize, residuals: Vec<f64> },

    #[error("dump format: {0}")]
    Dump(String),
}

impl GeomError {
    /// Whether the failure came from an iterative linear or eigen solve.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            GeomError::IterativeSolveFailure { .. }
                | GeomError::EigenNonConvergence { .. }
                | GeomError::MaxIterations { .. }
                | GeomError::ExtrapolationDivergence(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GeomError>;
