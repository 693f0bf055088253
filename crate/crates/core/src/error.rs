use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} is not positive definite (smallest eigenvalue {min_eig:.3e})")]
    NonPositiveDefinite { what: &'static str, min_eig: f64 },

    #[error("I - alpha_w^T alpha_w has eigenvalue {min_eig:.3e} below -tol; correlation is inconsistent")]
    FactorizationFailure { min_eig: f64 },

    #[error("time step {dt:.3e} exceeds the fast-resolution limit {limit:.3e} (c * eps^2)")]
    StepTooCoarse { dt: f64, limit: f64 },

    #[error("state norm {norm:.3e} exceeded the blow-up guard at t = {t}")]
    NumericalBlowup { t: f64, norm: f64 },

    #[error("averaged diffusion gap has eigenvalue {min_eig:.3e} at grid node {node}")]
    PsdViolation { node: usize, min_eig: f64 },

    #[error("intermediate drift is not centered at x = {x:?}: residual {residual:?}, stderr {stderr:?}")]
    NotCentered {
        x: Vec<f64>,
        residual: Vec<f64>,
        stderr: Vec<f64>,
    },

    #[error("particle weights collapsed onto a single particle at t = {t}")]
    WeightCollapse { t: f64 },

    #[error("particle at {x:?} left the averaged-model grid")]
    GridEscape { x: Vec<f64> },

    #[error("filter covariance lost symmetry or positivity at t = {t}")]
    CovarianceBlowup { t: f64 },

    #[error("all particle weights underflowed")]
    ZeroMass,

    #[error("measure paths are on different time grids")]
    GridMismatch,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown model {0:?}")]
    UnknownModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by bad input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownModel(_) | Error::InvalidArgument(_)
        )
    }
}

/// Non-fatal diagnostics attached to results.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Warning {
    /// Effective sample size of a stationary chain fell below the floor.
    Ergodicity { ess: f64, floor: f64 },
    /// Semigroup tail at the truncation horizon is not negligible.
    Truncation { tail: f64, tol: f64 },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::Ergodicity { ess, floor } => {
                write!(f, "stationary chain ESS {ess:.1} below floor {floor:.1}; results suspect")
            }
            Warning::Truncation { tail, tol } => {
                write!(f, "semigroup tail {tail:.3e} exceeds tolerance {tol:.3e}; increase t_max")
            }
        }
    }
}
