use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum SnlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gradient probe landed on a kink; re-sample the probe point")]
    KinkDetected,
    #[error("gates must be binary before {0}")]
    GatesNotBinary(&'static str),
    #[error("gates are frozen")]
    GatesFrozen,
    #[error("student gates must be frozen before KD finetuning")]
    GatesNotFrozen,
    #[error("training diverged (non-finite loss)")]
    Diverged,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    CheckpointTruncated,
    #[error("checkpoint checksum failure")]
    CheckpointChecksum,
    #[error("dataset file format error: {0}")]
    DatasetFormat(String),
    #[error("interior-solution hypothesis violated: {0}")]
    InteriorSolution(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, SnlError>;
