use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention mask row {0} permits no keys")]
    EmptyMaskRow(usize),
    #[error("parameter group `{0}` already exists")]
    DuplicateParam(String),
    #[error("unknown parameter group `{0}`")]
    UnknownParam(String),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("loss node must be 1x1, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("expert failed on task {task} seed {seed}")]
    ExpertFailure { task: String, seed: u64 },
    #[error("recurrent state tagged for episode {state} used with episode {cursor}")]
    StateTagMismatch { state: u64, cursor: u64 },
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("bad file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
