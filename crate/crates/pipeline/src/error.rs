use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments or configuration; reported with exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("plot {}: {reason}", path.display())]
    Plot { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] morphoflow_core::Error),

    #[error(transparent)]
    Model(#[from] morphoflow_model::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for usage and validation errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use morphoflow_core::Error as C;
        use morphoflow_model::Error as M;
        let core_is_usage = |e: &C| match e {
            C::InvalidInput(_) | C::ShapeMismatch { .. } | C::Json { .. } => true,
            C::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        match self {
            Error::Usage(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Core(e) if core_is_usage(e) => 2,
            Error::Model(M::Config(_) | M::InvalidInput(_) | M::Checkpoint { .. }) => 2,
            Error::Model(M::Core(e)) if core_is_usage(e) => 2,
            _ => 1,
        }
    }
}
