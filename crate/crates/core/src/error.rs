use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point has non-positive depth {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("ellipsoid semi-axes must be strictly positive")]
    NonPositiveSemiAxis,
    #[error("bounding-box plane has a vanishing normal")]
    DegeneratePlane,
    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue})")]
    CovarianceNotPsd { min_eigenvalue: f64 },
    #[error("insufficient parallax for triangulation")]
    InsufficientParallax,
    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("tangent-plane system is rank deficient")]
    RankDeficient,
    #[error("optimizer hit the iteration cap")]
    MaxItersExceeded,
    #[error("object shape collapsed below the minimum semi-axis")]
    ShapeCollapsed,
    #[error("observation frame {0} is outside the sliding window")]
    FrameOutOfWindow(u64),
    #[error("residual has no left null space")]
    NoNullspace,
    #[error("innovation rejected by the chi-square gate")]
    InnovationGateFailed,
    #[error("timestamp {t} is not after {prev}")]
    NonMonotonicTimestamp { prev: f64, t: f64 },
    #[error("object is behind the camera")]
    ObjectBehindCamera,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
