use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("sample spacing {spacing_s:e} s exceeds the Nyquist spacing {nyquist_s:e} s")]
    Undersampled { spacing_s: f64, nyquist_s: f64 },

    #[error("symbol {symbol} is outside the sampled echo ({available} symbols)")]
    WindowOutOfRange { symbol: usize, available: usize },

    #[error("delay {delay_s:e} s exceeds the simulation window limit {limit_s:e} s")]
    DelayExceedsWindow { delay_s: f64, limit_s: f64 },

    #[error("matrix is significantly indefinite (min eigenvalue {min_eigenvalue:e})")]
    Indefinite { min_eigenvalue: f64 },

    #[error("singular information for target {target}: {diagnostic}")]
    SingularInformation { target: usize, diagnostic: String },

    #[error("finite-difference step {step:e} underflows for parameter scale {scale:e}")]
    StepUnderflow { step: f64, scale: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("iteration limit reached: {0}")]
    MaxIterations(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bad bisection bracket: {0}")]
    BadBracket(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) | Error::SingularInformation { .. } => 2,
            Error::InvalidScenario(_) | Error::Config(_) | Error::Io(_) => 3,
            _ => 4,
        }
    }
}
