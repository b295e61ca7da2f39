use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("states live on different wavenumber ladders")]
    LadderMismatch,

    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operation needs a piecewise-linear path, got raw sampled data")]
    NotPiecewiseLinear,

    #[error("level {level} does not divide a grid of {n_grid} cells")]
    IndivisibleLevel { level: u32, n_grid: usize },

    #[error("evaluation point {point} outside ({lower}, {upper})")]
    OutsideInterval { point: f64, lower: f64, upper: f64 },

    #[error("fractional order {alpha} outside the admissible window ({lower}, {upper})")]
    IncompatibleOrder { alpha: f64, lower: f64, upper: f64 },

    #[error("step size {dt} does not divide the noise segment length {segment}")]
    StepMismatch { dt: f64, segment: f64 },

    #[error("blow-up guard tripped at t = {time}: norm {norm:.3e} exceeds {guard:.3e}")]
    BlowUp { time: f64, norm: f64, guard: f64 },

    #[error("4ab = {product} >= 1 at t = {time}")]
    EnvelopeViolation { time: f64, product: f64 },

    #[error("malformed path file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
