use thiserror::Error;

/// Errors raised by the geometry, SDE and experiment layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point is off the manifold: constraint residual {residual:e} exceeds {tolerance:e}")]
    OffManifold { residual: f64, tolerance: f64 },

    #[error("constraint Jacobian is rank deficient: smallest singular value {smallest_singular_value:e}")]
    RankDeficient { smallest_singular_value: f64 },

    #[error("numeric geodesic missed tolerance: residual {residual:e} (target {target:e})")]
    ToleranceNotMet { residual: f64, target: f64 },

    #[error("Newton constraint restoration did not converge: residual {residual:e} after {iterations} iterations")]
    RestorationFailed { residual: f64, iterations: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
