use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("weight archive error: {0}")]
    Archive(String),
    #[error("weight archive is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("undefined score: {0}")]
    UndefinedScore(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("gradient check failed on `{tensor}`: relative error {rel_err:.3e}")]
    GradCheck { tensor: String, rel_err: f64 },
    #[error("registration failed: insufficient matches ({0})")]
    InsufficientMatches(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
