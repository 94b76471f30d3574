use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("unsupported derivative order m = {0} (m <= 2 supported)")]
    UnsupportedOrder(usize),
    #[error("field has zero mass; moments are undefined")]
    ZeroMass,
    #[error("CFL substepping needs {needed} substeps, cap is {cap}")]
    CflUnderflow { needed: usize, cap: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("characteristic escaped the safety hull at ({x}, {y}) and cannot be evaluated analytically")]
    CharacteristicEscape { x: f64, y: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("line search failed after {0} backtracks")]
    LinesearchFailure(usize),
    #[error("unsupported drift for the exact flow oracle: {0}")]
    UnsupportedDrift(String),
    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    /// Bad input rather than a numerical breakdown.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::Io { .. }
                | Error::InvalidGrid(_)
                | Error::InvalidTimeGrid(_)
                | Error::UnknownPreset(_)
                | Error::InvalidArgument(_)
                | Error::UnsupportedDrift(_)
                | Error::UnsupportedOrder(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
