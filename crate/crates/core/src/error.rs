use thiserror::Error;

/// Errors raised by the inference, training and I/O layers.
#[derive(Debug, Error)]
pub enum FlowrError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("label {label} is not a known class and not the next novel index {next}")]
    LabelOutOfRange { label: usize, next: usize },

    #[error("class {label} has not been instantiated ({n_classes} classes known)")]
    UnknownClass { label: usize, n_classes: usize },

    #[error("labels must be densely numbered from 1: {0}")]
    NonDenseLabels(String),

    #[error("invalid CRP state: {0}")]
    InvalidCrpState(String),

    #[error("invalid arrival order at position {position}: label {label} before label {expected}")]
    InvalidArrivalOrder {
        position: usize,
        label: usize,
        expected: usize,
    },

    #[error("query {index}: {source}")]
    Query {
        index: usize,
        #[source]
        source: Box<FlowrError>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("invalid score set: {0}")]
    InvalidScores(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint error in section '{section}': {message}")]
    Checkpoint { section: String, message: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FlowrError {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            FlowrError::DimensionMismatch { .. } => "dimension_mismatch",
            FlowrError::LabelOutOfRange { .. } => "label_out_of_range",
            FlowrError::UnknownClass { .. } => "unknown_class",
            FlowrError::NonDenseLabels(_) => "non_dense_labels",
            FlowrError::InvalidCrpState(_) => "invalid_crp_state",
            FlowrError::InvalidArrivalOrder { .. } => "invalid_arrival_order",
            FlowrError::Query { source, .. } => source.kind(),
            FlowrError::Config(_) => "config",
            FlowrError::InsufficientData(_) => "insufficient_data",
            FlowrError::Diverged { .. } => "diverged",
            FlowrError::InvalidScores(_) => "invalid_scores",
            FlowrError::Format { .. } => "format",
            FlowrError::Checkpoint { .. } => "checkpoint",
            FlowrError::Unsupported(_) => "unsupported",
            FlowrError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, FlowrError>;
