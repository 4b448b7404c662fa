//! Crate-wide error type.

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input text (adjacency files, CSV tables, configs).
    #[error("format error: {0}")]
    Format(String),

    /// A label was referenced but never defined.
    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    /// A numeric argument outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched dimensions between two objects that must agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Inconsistent or incomplete count data.
    #[error("data error: {0}")]
    Data(String),

    /// Internal standardization would produce a zero expected count.
    #[error("degenerate rate: no observed cases for period `{period}`, disease `{disease}`")]
    DegenerateRate { period: String, disease: String },

    /// A chain reached a non-finite log-posterior.
    #[error("chain {chain} diverged at iteration {iteration}: non-finite state or log-posterior")]
    Diverged { chain: usize, iteration: usize },

    /// All chains are constant; the PSRF is undefined.
    #[error("degenerate chains: within-chain variance is zero")]
    DegenerateChains,

    /// A summary was requested over zero draws.
    #[error("empty draw sequence")]
    EmptyDraws,

    /// Label join failure between two tables or files.
    #[error("label join failed: {0}")]
    Join(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
