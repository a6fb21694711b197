use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum KpcError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed csv at line {line}: {msg}")]
    MalformedCsv { line: usize, msg: String },
    #[error("invalid rotation in column '{column}' at row {row}: {msg}")]
    InvalidRotation { column: String, row: usize, msg: String },
    #[error("dataset is empty")]
    EmptyData,
    #[error("column '{0}' has zero variance")]
    ZeroVariance(String),
    #[error("metric incompatible with column types: {0}")]
    IncompatibleMetric(String),
    #[error("kernel/point type mismatch: {0}")]
    TypeMismatch(String),
    #[error("all pairwise distances are zero; median bandwidth undefined")]
    DegenerateBandwidth,
    #[error("too few points: need at least {need}, have {have}")]
    TooFewPoints { need: usize, have: usize },
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("denominator {denominator:e} is degenerate")]
    DegenerateDenominator { denominator: f64 },
    #[error("gram matrix is not positive semidefinite")]
    NonPsdGram,
    #[error("negative residual diagonal {value:e} at index {index}")]
    NegativeDiagonal { index: usize, value: f64 },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("Y is a deterministic function of X on the whole support")]
    DegenerateY,
    #[error("configuration is not symmetric under knockoff swaps: {0}")]
    AsymmetricConfig(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
}

pub type Result<T> = std::result::Result<T, KpcError>;
