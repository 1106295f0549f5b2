use thiserror::Error;

/// Errors produced by network construction, integration and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported device: {0}")]
    UnsupportedDevice(String),

    #[error("numeric error at step {step}: {message}")]
    Numeric { step: usize, message: String },

    /// A non-finite state appeared during integration. `step` is the
    /// 0-based index of the step whose update produced it.
    #[error("integration diverged at step {step}{}", layer.map(|l| format!(" of layer {l}")).unwrap_or_default())]
    Divergence { step: usize, layer: Option<usize> },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training aborted at epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for divergence and non-finite arithmetic, including when raised
    /// inside a training run.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } | Error::Divergence { .. } => true,
            Error::Training { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    /// Attach a layer index to a divergence error coming out of a single layer.
    pub(crate) fn in_layer(self, layer: usize) -> Self {
        match self {
            Error::Divergence { step, layer: None } => Error::Divergence {
                step,
                layer: Some(layer),
            },
            other => other,
        }
    }
}
