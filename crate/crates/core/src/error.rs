use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("simulation failed at step {step}: {msg}")]
    Simulation { step: usize, msg: String },
    #[error("control out of domain: {0}")]
    ControlDomain(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature failed: {0}")]
    Quadrature(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Unsupported,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Syntax { .. }
            | Error::UnknownIdentifier { .. }
            | Error::Model(_)
            | Error::Config(_)
            | Error::GridMismatch(_)
            | Error::Format(_) => ErrorClass::Config,
            Error::Unsupported(_) => ErrorClass::Unsupported,
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Numeric,
        }
    }
}
