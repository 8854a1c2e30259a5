use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("({s}, {t}) lies outside the triangle 0 <= s <= t <= {horizon}")]
    Domain { s: f64, t: f64, horizon: f64 },

    #[error("kernel `{kernel}` is singular on the diagonal s = t = {t}")]
    Singularity { kernel: String, t: f64 },

    #[error("adaptive quadrature on [{a}, {b}] stalled at error estimate {estimate:e} after {subdivisions} subdivisions")]
    Quadrature {
        a: f64,
        b: f64,
        estimate: f64,
        subdivisions: usize,
    },

    #[error("kernel `{kernel}` raised to the power {power} is not integrable: exponent {exponent} >= 1")]
    DivergentIntegral {
        kernel: String,
        power: f64,
        exponent: f64,
    },

    #[error("grid covers {found} dyadic gap scales, at least {required} are required")]
    GridTooCoarse { found: usize, required: usize },

    #[error("kernel `{kernel}` has no first-argument derivative")]
    MissingDerivative { kernel: String },

    #[error("kernel `{kernel}` is not of convolution form")]
    NotConvolution { kernel: String },

    #[error("coefficient `{label}` violates its growth bound at (t={t}, x={x}): |f| = {value} > {bound}")]
    GrowthViolation {
        label: String,
        t: f64,
        x: f64,
        value: f64,
        bound: f64,
    },

    #[error("path {path} produced a non-finite state at step {step}")]
    NonFiniteState { path: u64, step: usize },

    #[error("{aborted} of {total} paths aborted, more than the tolerated 0.1%")]
    TooManyAborted { aborted: usize, total: u64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("ensembles were generated from different seeds ({first} vs {second})")]
    SeedMismatch { first: u64, second: u64 },

    #[error("{have} paths supplied, at least {need} are required")]
    InsufficientPaths { have: usize, need: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
