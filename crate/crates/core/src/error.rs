use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("artifacts were built for different model specs")]
    SpecMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("model store: {0}")]
    Store(String),

    #[error("merge node {path}: {source}")]
    Node {
        path: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// `true` for failures caused by numerics (non-finite values, divergence)
    /// rather than malformed inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => true,
            Error::Node { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
