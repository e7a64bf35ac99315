use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared while evaluating a network layer.
    #[error("non-finite value in layer {layer}")]
    NonFiniteLayer { layer: usize },

    /// A non-finite value appeared for a given training sample.
    #[error("non-finite {what} at sample {index}")]
    NonFiniteSample { what: &'static str, index: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("sampler diverged at iteration {iteration}")]
    SamplerDiverged { iteration: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 config, 3 numeric/divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::NonFiniteLayer { .. }
            | Error::NonFiniteSample { .. }
            | Error::TrainingDiverged { .. }
            | Error::SamplerDiverged { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Stage { .. } => unreachable!("root() strips stage wrappers"),
        }
    }
}
