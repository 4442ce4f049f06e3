use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsdError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },

    #[error("drift is undefined or non-finite at x = {x}")]
    DriftUndefined { x: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature did not converge on [{a}, {b}] (estimated relative error {rel_err:e})")]
    Quadrature { a: f64, b: f64, rel_err: f64 },

    #[error("potential table limit exceeded: x = {x} > {limit}")]
    DomainLimit { x: f64, limit: f64 },

    #[error("ODE step size underflow at x = {x}")]
    StepUnderflow { x: f64 },

    #[error("query x = {x} lies outside the grid [{lo}, {hi}]")]
    OutOfGrid { x: f64, lo: f64, hi: f64 },

    #[error("undecided: {0}")]
    Undecided(String),

    #[error("bracket failure: {0}")]
    Bracket(String),

    #[error("inconsistency: {0}")]
    Inconsistent(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, QsdError>;

impl From<std::io::Error> for QsdError {
    fn from(e: std::io::Error) -> Self {
        QsdError::Io(e.to_string())
    }
}
