use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("|alpha| must be non-negative, got {0}")]
    NegativeAlphaMag(f64),
    #[error("non-finite value in field `{0}`")]
    NonFiniteField(&'static str),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("time grid has no steps")]
    ZeroStepGrid,
    #[error("ensemble of {requested} values exceeds the cap of {cap}")]
    OverflowingEnsembleSize { requested: usize, cap: usize },
    #[error("jump processes (beta = {0}) are out of scope; only continuous martingales are supported")]
    JumpsUnsupported(f64),
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("moment of order {0} requested; at most 8 is supported")]
    OrderTooHigh(u32),
    #[error("ensemble of {got} paths is too small; need at least {need}")]
    EnsembleTooSmall { got: usize, need: usize },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("time {0} does not lie on the grid")]
    TimeNotOnGrid(f64),
    #[error("integrand has no derivative callback")]
    MissingDerivative,
    #[error("missing velocity data: {0}")]
    MissingVelocity(String),
    #[error("missing geometry data: {0}")]
    MissingGeometry(String),
    #[error("unstable parameters: {0}")]
    UnstableParameters(String),
    #[error("linear solver diverged: {0}")]
    SolverDivergence(String),
    #[error("unsupported dimension {0}")]
    UnsupportedDim(usize),
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
    #[error("unknown analytic family `{0}`")]
    UnknownFamily(String),
    #[error("node region too large: {0}")]
    NodeRegionTooLarge(String),
    #[error("field has zero norm")]
    ZeroNorm,
    #[error("drift lookup at {0} lies outside the field box")]
    DriftLookupOutOfBox(f64),
    #[error("step too large: |b| dt = {displacement} exceeds the box width {width}")]
    StepTooLarge { displacement: f64, width: f64 },
    #[error("singular jacobian at the evaluation point")]
    SingularJacobian,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("singular metric at the evaluation point")]
    SingularMetric,
    #[error("gauge {gauge} is incompatible with m^2 = {mass_sq}")]
    IncompatibleGauge { gauge: String, mass_sq: f64 },
    #[error("m^2 must be positive, got {0}")]
    NonPositiveMassSq(f64),
    #[error("{fraction:.3} of the paths left the chart (threshold {threshold})")]
    ChartExit { fraction: f64, threshold: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
