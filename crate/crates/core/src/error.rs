use thiserror::Error;

#[derive(Debug, Error)]
pub enum UqdError {
    #[error("no evaluations")]
    NoEvaluations,

    #[error("cannot append an empty batch of samples")]
    EmptyAppend,

    #[error("record not in archive: {0}")]
    RecordNotInArchive(u64),

    #[error("cannot select from empty archive")]
    EmptyArchive,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("budget exceeded: archive too large for Archive-Sampling ({slots} slots x {reeval_samples} samples > {available} available evaluations)")]
    BudgetExceeded {
        slots: usize,
        reeval_samples: usize,
        available: usize,
    },

    #[error("sampling size below first-eval samples ({sampling_size} < {samples})")]
    SamplingSizeTooSmall { sampling_size: usize, samples: usize },

    #[error("unknown preset `{name}`; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("unknown task `{0}`; valid tasks: arm_fit_noise, arm_desc_noise, arm_clean, sphere")]
    UnknownTask(String),

    #[error("task `{0}` requires a physics simulator and is not available in this toolkit")]
    UnsupportedTask(String),

    #[error("snapshot does not match task: {0}")]
    SnapshotMismatch(String),

    #[error("task evaluation failed at generation {generation}: {source}")]
    Evaluation {
        generation: u64,
        #[source]
        source: Box<UqdError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, UqdError>;
