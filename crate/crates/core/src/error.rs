use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("step index {t} outside {min}..={max}")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("half-log-SNR is undefined at t = 0 (sigma = 0)")]
    UndefinedSnr,

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown dataset kind `{0}`")]
    UnknownDataset(String),

    #[error("unknown sampler `{0}`")]
    UnknownSampler(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("negative injected noise variance {value} at t = {t}")]
    NegativeInjectedVariance { t: usize, value: f64 },

    #[error("midpoint inversion failed: {0}")]
    MidpointInversion(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
