use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed episode encoding at token {position}: {reason}")]
    Structure { position: usize, reason: String },

    #[error("expert `{name}` failed: {source}")]
    Expert {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("training diagnostics: {0}")]
    Diagnostics(String),

    #[error("episode {index} has {len} tokens, context window is {window}")]
    ContextOverflow {
        index: usize,
        len: usize,
        window: usize,
    },

    #[error("runaway generation: no state boundary after {tokens} tokens")]
    Runaway { tokens: usize },

    #[error("no episodes survived selection ({discarded} chains discarded)")]
    EmptyTrainingSet { discarded: usize },

    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing upstream artifact {path} (produce it with `{producer}`)")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
