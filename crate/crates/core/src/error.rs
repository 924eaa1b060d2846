use thiserror::Error;

/// Errors surfaced by the simulator, trainer and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("insufficient samples: {0}")]
    Samples(String),

    #[error("training diverged at epoch {epoch}, step {step}: {component} is not finite")]
    Diverged {
        epoch: usize,
        step: usize,
        component: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Distribution(_) => "distribution",
            Error::Samples(_) => "samples",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
