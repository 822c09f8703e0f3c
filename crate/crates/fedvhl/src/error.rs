use thiserror::Error;

/// Errors surfaced by the simulator and analysis toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor did not have the dimensions required by the model layout.
    #[error("shape mismatch at {site}: expected {expected}, got {actual}")]
    ShapeMismatch {
        site: String,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Contrastive loss was asked for but no usable anchor row exists.
    #[error("no usable anchor: {0}")]
    NoAnchor(String),

    /// A feature row had zero norm and cannot be L2-normalized.
    #[error("cannot normalize zero-norm feature row {row}")]
    DegenerateFeature { row: usize },

    /// A non-finite value was produced where a finite one is required.
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("partition error: {0}")]
    Partition(String),

    /// Malformed IDX payload; `offset` is the byte position of the defect.
    #[error("idx parse error at byte {offset}: {reason}")]
    IdxParse { offset: usize, reason: String },

    /// Malformed virtual-dataset container; `offset` is the byte position.
    #[error("container parse error at byte {offset}: {reason}")]
    ContainerParse { offset: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    /// Local training produced a non-finite loss.
    #[error("divergence on client {client} at round {round}, step {step}")]
    Divergence {
        client: usize,
        round: usize,
        step: usize,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// No candidate point is classified differently from `label`, so the
    /// margin for that label is undefined.
    #[error("margin undefined for label {label}: no violating candidate")]
    MarginUndefined { label: usize },

    /// The exact transport solver only accepts equal, small per-class supports.
    #[error("unsupported instance: {0}")]
    UnsupportedInstance(String),

    #[error("theory check violated: {0}")]
    TheoryViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 config, 2 numeric divergence,
    /// 3 theory-check violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonFinite { .. } => 2,
            Error::TheoryViolation(_) => 3,
            _ => 1,
        }
    }
}
