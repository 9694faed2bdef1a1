use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rate parameters: {0}")]
    InvalidRateParams(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("singular unstable block between indices {from} and {to}: sigma_min/sigma_max = {ratio:e}")]
    SingularUnstableBlock { from: usize, to: usize, ratio: f64 },

    #[error("no finite dichotomy constant D on the window: {0}")]
    NoFiniteD(String),

    #[error("integration step too coarse: composition-law self-check {defect:e} exceeds {tolerance:e}")]
    StepTooCoarse { defect: f64, tolerance: f64 },

    #[error("vector does not lie in the {fiber} fiber at node {node}: defect {defect:e}")]
    FiberMismatch { fiber: &'static str, node: usize, defect: f64 },

    #[error("truncation tail bound {bound:e} exceeds tolerance {tolerance:e}")]
    TailBoundTooLarge { bound: f64, tolerance: f64 },

    #[error("quadrature unresolved: Richardson estimate {estimate:e} exceeds {tolerance:e}")]
    QuadratureUnresolved { estimate: f64, tolerance: f64 },

    #[error("operator is not a contraction: {condition}: q = {q} >= 1")]
    NotContractive { condition: &'static str, q: f64 },

    #[error("fixed-point iteration diverged: {0}")]
    Diverged(String),

    #[error("invalid sign: {0}")]
    InvalidSign(String),

    #[error("singular boundary-value assembly: {0}")]
    SingularAssembly(String),

    #[error("Newton iteration stalled: residual {residual:e} after {iterations} iterations")]
    NewtonStalled { residual: f64, iterations: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::InvalidInput(_) | Error::InvalidSign(_) => 2,
            Error::InvalidRateParams(_) => 2,
            Error::NotContractive { .. } => 3,
            _ => 4,
        }
    }
}
