use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("value outside its domain: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("pattern alignment impossible: {0}")]
    AlignmentImpossible(String),
    #[error("no signal: zero counts in the scored gates")]
    NoSignal,
    #[error("insufficient data: need at least {needed} trials per cell, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("bound undefined: {0}")]
    UndefinedBound(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure(cond: bool, kind: fn(String) -> Error, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(kind(msg()))
    }
}
