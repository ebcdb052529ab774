//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors raised by simulation, estimation and verification.
#[derive(Debug, Error)]
pub enum Error {
    /// A departure mark removes more customers than a queue holds. This
    /// signals a bug in a model plug-in, not a user error.
    #[error("negative state: queue {queue} holds {have} but mark removes {remove}")]
    NegativeState {
        queue: usize,
        have: u32,
        remove: u32,
    },

    /// An external arrival and a service completion landed on the identical
    /// timestamp and the tie policy is `reject`.
    #[error("simultaneity violation at t = {time}: arrival and departure share an epoch")]
    SimultaneityViolation { time: f64 },

    /// A distribution was declared with parameters outside its domain.
    #[error("invalid parameter for {what}: {why}")]
    InvalidParameter { what: &'static str, why: String },

    /// The traffic equations have no usable solution.
    #[error("traffic equations did not converge: {0}")]
    NonConvergent(String),

    /// An estimator was asked to work on an empty sample log.
    #[error("empty sample log: {0}")]
    EmptyLog(&'static str),

    /// A check needs an estimate the scenario did not produce.
    #[error("missing estimate: {0}")]
    MissingEstimate(String),

    /// A stationary check cannot be graded because an assumption of the
    /// framework was violated on the produced path.
    #[error("inapplicable assumption: {0}")]
    InapplicableAssumption(String),

    /// Evaluation requested at (or too close to) a removable singularity
    /// with limit handling disabled.
    #[error("singular point: {0}")]
    SingularPoint(String),

    /// Scenario file failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A jump-log file could not be parsed.
    #[error("malformed jump log at line {line}: {why}")]
    MalformedLog { line: usize, why: String },
}

pub type Result<T> = std::result::Result<T, Error>;
