use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A layer stack does not shape-check, or an input does not match it.
    #[error("configuration error at layer {layer}: {msg}")]
    Config { layer: usize, msg: String },

    /// Malformed input data (bad labels, bad file contents).
    #[error("data error: {0}")]
    Data(String),

    /// IDX / CSV parse failures, with the byte offset where parsing stopped.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Client/server architecture disagreement on the wire.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A partition plan that cannot be satisfied.
    #[error("partition plan error: {0}")]
    Plan(String),

    /// Internal invariant violated (stale cache, time regression).
    #[error("internal consistency error: {0}")]
    Internal(String),

    /// Non-finite gradients or parameters; training aborted.
    #[error("training aborted: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
