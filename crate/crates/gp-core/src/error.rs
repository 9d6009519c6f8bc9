use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported derivative order {order} (orders up to 4 are tabulated)")]
    UnsupportedDerivativeOrder { order: usize },

    #[error("multi-index has {len} entries but the kernel dimension is {dim}")]
    DerivativeIndexMismatch { len: usize, dim: usize },

    #[error(
        "domain too large for tolerance {tolerance:e}: series degree {required} needed, \
         configured maximum is {max_degree}"
    )]
    DomainTooLarge {
        required: usize,
        max_degree: usize,
        tolerance: f64,
    },

    #[error("domain half-extent {half} exceeds the representable range of the series basis ({max})")]
    DomainOutOfRange { half: f64, max: f64 },

    #[error(
        "circulant embedding is not nonnegative: min eigenvalue {min_eig:e} \
         (relative {rel:e}); increase the padding"
    )]
    EmbeddingNotNonnegative { min_eig: f64, rel: f64 },

    #[error("covariance matrix of the gradient is singular (degenerate gradient law)")]
    SingularGradientCovariance,

    #[error(
        "the (value, Hessian) moment block is singular; use the monochromatic branch \
         for this kernel"
    )]
    SingularValueHessianBlock,

    #[error(
        "gradient pin covariance is near-degenerate at separation {separation:e} \
         (condition number {cond:e}); this is the divided-difference regime"
    )]
    DegenerateSeparation { separation: f64, cond: f64 },

    #[error(
        "effective sample size {ess:.1} below {min_ess:.1} for batch size {batch}; \
         increase the batch size"
    )]
    EssTooLow { ess: f64, min_ess: f64, batch: usize },

    #[error("field has no analytic evaluator (grid-only); this operation needs derivatives")]
    GridOnlyField,

    #[error("grid spacing {spacing} is coarser than the required scan spacing {required}")]
    GridTooCoarse { spacing: f64, required: f64 },

    #[error("point ({x}, {y}) lies outside the window [-{half}, {half}]^2")]
    PointOutsideWindow { x: f64, y: f64, half: f64 },

    #[error("box {index} is not contained in the pattern window")]
    BoxOutsideWindow { index: usize },

    #[error("covariance diagonals differ at index {index}: {left} vs {right}")]
    DiagonalMismatch { index: usize, left: f64, right: f64 },

    #[error("off-diagonal correlation at ({i}, {j}) has modulus >= 1")]
    CorrelationOutOfRange { i: usize, j: usize },

    #[error("no root of the expected-maximum equation: window side {side} is too small")]
    NoRoot { side: f64 },

    #[error("operation requires dimension {required}, kernel has dimension {actual}")]
    DimensionMismatch { required: usize, actual: usize },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("kernel family {family:?} is not supported by this operation")]
    UnsupportedFamily { family: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
