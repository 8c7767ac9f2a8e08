//! Crate-wide error type.

/// Errors produced by solvers, evaluators and the simulator.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// A trajectory left the finite range during integration or simulation.
    /// `t` is the time at which the failure was detected.
    #[error("solution blew up at t = {t}: {context}")]
    BlowUp { t: f64, context: String },

    /// An evaluation time outside the solved horizon.
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    /// Inconsistent configuration (grid mismatch, bad step, bad counts).
    #[error("configuration error: {0}")]
    Config(String),

    /// Model validation failed; the message lists the first violation.
    #[error("model validation failed: {0}")]
    Validation(String),

    /// A scaling experiment where every measured gap is statistically zero.
    #[error("insufficient signal: {0}")]
    InsufficientSignal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
