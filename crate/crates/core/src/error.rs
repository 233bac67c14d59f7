use std::path::PathBuf;

/// Errors raised by the restoration toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("timestep {value} outside [0, {t_max}]")]
    TimestepOutOfRange { value: f64, t_max: usize },

    #[error("degenerate noise: standard deviation of the raw mixture is zero for sample {sample}")]
    DegenerateNoise { sample: usize },

    #[error("signal coefficient {alpha:e} too small to invert")]
    VanishingSignal { alpha: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("fingerprint mismatch: checkpoint {checkpoint}, requested {requested}")]
    FingerprintMismatch { checkpoint: String, requested: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("model is untrained; pass the diagnostics flag to run it anyway")]
    Untrained,

    #[error("non-finite loss at iteration {iteration}: {components}")]
    NonFinite { iteration: u64, components: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
