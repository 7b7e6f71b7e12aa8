use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid lattice matrix: {0}")]
    InvalidLattice(String),

    #[error("invalid shear term: {0}")]
    InvalidShear(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cocycle entry magnitude {magnitude:e} exceeded cap {cap:e} after {steps} steps")]
    CocycleOverflow { steps: usize, magnitude: f64, cap: f64 },

    #[error("singular jacobian (|det| = {0:e})")]
    SingularJacobian(f64),

    #[error("slope chart undefined for near-vertical direction ({0:e}, {1:e})")]
    VerticalDirection(f64, f64),

    #[error("resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(usize, usize),

    #[error("not hyperbolic at this horizon: kappa_hat = {kappa}, lambda_hat = {lambda}")]
    NotHyperbolic { kappa: f64, lambda: f64 },

    #[error("splitting did not converge: achieved tolerance {achieved:e} (required {required:e})")]
    NonConvergentSplitting { achieved: f64, required: f64 },

    #[error("manifold growth failed: {0}")]
    ManifoldGrowth(String),

    #[error("arclength {t} outside [-{half_length}, {half_length}]")]
    ArclengthOutOfRange { t: f64, half_length: f64 },

    #[error("degenerate: distribution indistinguishable from constant at this precision ({admissible} admissible samples)")]
    Degenerate { admissible: usize },

    #[error("graph chart left at orbit index {orbit_index} (condition number {condition:e})")]
    GraphChartLeft { orbit_index: usize, condition: f64 },

    #[error("ray directions must sum to zero (residual {0:e})")]
    RaySum(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
