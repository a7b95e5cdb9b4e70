//! Crate-wide error type.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix or vector dimensions are inconsistent with the operation.
    Dimensions(String),
    /// An input contained NaN or infinity.
    NonFinite(String),
    /// A weight matrix failed a definiteness requirement.
    Indefinite(String),
    /// Riccati iteration did not reach the residual tolerance.
    DareNoConvergence { residual: f64, iterations: usize },
    /// Synthesized gains do not stabilize the system they were built for.
    UnstableGains { rho_control: f64, rho_observer: f64 },
    /// A matrix that must be inverted is singular (or numerically so).
    Singular(String),
    /// A stability certificate cannot be issued (contraction factor >= 1).
    CertificateVoid { alpha: f64 },
    /// Simulation or gradient propagation produced a non-finite value.
    NumericalAbort { step: usize, what: String },
    /// An operation's stated precondition was violated.
    Precondition(String),
    /// Malformed serialized data.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimensions(what) => write!(f, "dimension mismatch: {what}"),
            Error::NonFinite(what) => write!(f, "non-finite input: {what}"),
            Error::Indefinite(what) => write!(f, "indefinite matrix: {what}"),
            Error::DareNoConvergence {
                residual,
                iterations,
            } => write!(
                f,
                "DARE iteration did not converge after {iterations} iterations \
                 (last residual {residual:.3e})"
            ),
            Error::UnstableGains {
                rho_control,
                rho_observer,
            } => write!(
                f,
                "gains do not stabilize the plant: rho(A-BK) = {rho_control:.6}, \
                 rho(A-LC) = {rho_observer:.6}"
            ),
            Error::Singular(what) => write!(f, "singular matrix: {what}"),
            Error::CertificateVoid { alpha } => write!(
                f,
                "contraction certificate void: estimated factor {alpha:.6} >= 1"
            ),
            Error::NumericalAbort { step, what } => {
                write!(f, "non-finite value at step {step}: {what}")
            }
            Error::Precondition(what) => write!(f, "precondition violated: {what}"),
            Error::Format(what) => write!(f, "format error: {what}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
