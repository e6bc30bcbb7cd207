use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("diffusion matrix is singular at x = {x:?} (condition estimate {condition:e})")]
    SingularDiffusion { x: Vec<f64>, condition: f64 },

    #[error("unknown model kind `{0}`")]
    UnknownModel(String),

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("unknown simulation scheme `{0}`")]
    UnknownScheme(String),

    #[error("scheme `{scheme}` cannot simulate model `{model}`")]
    SchemeMismatch { scheme: String, model: String },

    #[error("non-finite or non-positive state on path {path} at step {step}")]
    Nonfinite { path: usize, step: usize },

    #[error("invalid simulation config: {0}")]
    InvalidSimConfig(String),

    #[error("sample set is empty or too small (n = {0})")]
    EmptySamples(usize),

    #[error("probability {0} is outside [0, 1]")]
    POutOfRange(f64),

    #[error("sample {index} has value {value}; samples must be finite and positive")]
    InvalidSample { index: usize, value: f64 },

    #[error("regularized estimate requested but the sample set carries no auxiliary Brownian draws")]
    MissingAux,

    #[error("bad discrete distribution: {0}")]
    BadDistribution(String),

    #[error("grid function has domain {found}, expected {expected}")]
    DomainMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("maximizer hit q_max = {q_max} at p = {p}; enlarge the q window")]
    ArgmaxAtBoundary { p: f64, q_max: f64 },

    #[error("grid function is not strictly convex near node {index}")]
    NotStrictlyConvex { index: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("finite-difference solver supports d <= 2, got d = {0}")]
    DimensionUnsupported(usize),

    #[error("surfaces live on different grids: {0}")]
    GridMismatch(String),

    #[error("argument outside oracle domain: {0}")]
    Domain(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed surface file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures caused by the user's inputs rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownModel(_)
                | Error::InvalidCoefficients(_)
                | Error::InvalidPayoff(_)
                | Error::Expression(_)
                | Error::UnknownScheme(_)
                | Error::SchemeMismatch { .. }
                | Error::InvalidSimConfig(_)
                | Error::InvalidGrid(_)
                | Error::DimensionUnsupported(_)
                | Error::GridMismatch(_)
                | Error::UnknownMethod(_)
                | Error::Config(_)
                | Error::Format(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Toml(_)
        )
    }
}
