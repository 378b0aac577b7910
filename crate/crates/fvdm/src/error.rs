use std::path::PathBuf;

/// Failures of the std layer, each mapped onto a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum FvdmError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    ToleranceFailed(String),
    #[error(transparent)]
    Core(#[from] fvdm_core::Error),
}

impl FvdmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 usage, 3 divergence, 4 tolerance failure, 5 insufficient samples,
    /// 1 for anything else (e.g. an unwritable output directory).
    pub fn exit_code(&self) -> u8 {
        use fvdm_core::Error as E;
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Self::Io { .. } => 1,
            Self::ToleranceFailed(_) => 4,
            Self::Core(E::Diverged { .. } | E::NonFiniteLoss { .. }) => 3,
            Self::Core(E::InsufficientSamples { .. }) => 5,
            Self::Core(
                E::Shape(_)
                | E::EmptyShape(_)
                | E::InvalidTask(_)
                | E::InvalidArgument(_)
                | E::Checkpoint(_)
                | E::IndexOutOfRange { .. }
                | E::TimeOutOfRange { .. },
            ) => 2,
            Self::Core(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, FvdmError>;
