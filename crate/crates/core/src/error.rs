use thiserror::Error;

/// Error type shared across the library.
#[derive(Error, Debug)]
pub enum CoreError {
    /// Graph construction or lookup problem (bad ids, arity, slots).
    #[error("graph error: {0}")]
    Graph(String),

    /// Numeric evaluation left an op's domain; `node` is the graph node id.
    #[error("domain error in {op} at node {node}: {detail}")]
    Domain {
        op: &'static str,
        node: u32,
        detail: String,
    },

    /// A linear system or factorization could not be completed.
    #[error("linear algebra error: {0}")]
    Linear(String),

    /// Optimization failed in a way that has no usable fallback iterate.
    #[error("optimization error: {0}")]
    Optim(String),

    /// Malformed model, parameter, or configuration input.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
