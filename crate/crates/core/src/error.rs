use thiserror::Error;

/// Errors surfaced by the simulator core.
///
/// Construction-time validation uses `Config`; runtime contract violations
/// use the more specific variants so callers can react (e.g. fall back to
/// another pool on `Capacity`).
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("unknown actor id {0}")]
    UnknownActor(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("capacity exhausted in pool '{pool}': requested {requested}, free {free}")]
    Capacity {
        pool: String,
        requested: u64,
        free: u64,
    },

    #[error("unknown pool '{0}'")]
    UnknownPool(String),

    #[error("duplicate pool label '{0}'")]
    DuplicatePool(String),

    #[error("unknown worker '{0}'")]
    UnknownWorker(String),

    #[error("routing failed: {0}")]
    Routing(String),

    #[error("dispatch failed: {0}")]
    Dispatch(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("simulation aborted: {0}")]
    Aborted(String),
}

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        SimError::Contract(msg.into())
    }
}
