//! Error type shared by the core primitives.

use alloc::string::String;

/// Errors raised by the core primitives.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// A search-space description violates one of its invariants.
    #[error("invalid search space: {0}")]
    InvalidSpec(String),
    /// An architecture code has the wrong number of genes for its space.
    #[error("dimension mismatch in {field}: expected {expected}, got {got}")]
    DimensionMismatch {
        /// Which gene list was wrong.
        field: &'static str,
        /// Length required by the search space.
        expected: usize,
        /// Length supplied.
        got: usize,
    },
    /// A gene value is not one of the allowed choices.
    #[error("{field}[{index}] = {value} is not an allowed choice")]
    OutOfChoice {
        /// Which gene list held the bad value.
        field: &'static str,
        /// Position of the gene.
        index: usize,
        /// Offending value.
        value: usize,
    },
    /// Requested resolution cannot be processed by the topology.
    #[error("resolution {resolution} is not divisible by 2^{stages}")]
    BadResolution {
        /// Requested square resolution.
        resolution: usize,
        /// Number of down-sampling stages.
        stages: usize,
    },
    /// No architecture in the space satisfies the MACs budget.
    #[error("budget infeasible: smallest admissible MACs {smallest}, window [{min}, {max}]")]
    BudgetInfeasible {
        /// MACs of the cheapest code in the space.
        smallest: u64,
        /// Lower bound of the budget window.
        min: u64,
        /// Upper bound of the budget window.
        max: u64,
    },
    /// A scalar argument is outside its domain.
    #[error("{name} = {value} out of range")]
    OutOfRange {
        /// Argument name.
        name: &'static str,
        /// Supplied value.
        value: f64,
    },
    /// Partitioning was asked to split an empty id list.
    #[error("cannot partition an empty id list")]
    EmptyIds,
    /// The EMA tracker has not seen a score yet.
    #[error("EMA tracker used before its first update")]
    UninitializedTracker,
}

/// Convenience alias.
pub type Result<T> = core::result::Result<T, CoreError>;
