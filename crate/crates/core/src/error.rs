use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator, learners and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("link to dead node {0}")]
    DeadLink(usize),
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error("event not due: event at step {event_time}, state at step {state_step}")]
    EventNotDue { event_time: u32, state_step: u32 },
    #[error("action shape mismatch: expected {expected} actions, got {got}")]
    ActionShape { expected: usize, got: usize },
    #[error("empty episode")]
    EmptyEpisode,
    #[error("numerical divergence")]
    NumericalDivergence,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("buffer underfilled: {have} tuples, need {need}")]
    BufferUnderfilled { have: usize, need: usize },
    #[error("quorum lost: all {0} updates rejected")]
    QuorumLost(usize),
    #[error("stale sync: snapshot step {snapshot} < last sync {last_sync}")]
    StaleSync { snapshot: u32, last_sync: u32 },
    #[error("node count mismatch: {0} vs {1}")]
    NodeCountMismatch(usize, usize),
    #[error("out-of-vocabulary token: {0}")]
    OutOfVocabulary(String),
    #[error("generator starved after {0} attempts")]
    GeneratorStarved(usize),
    #[error("both replay pools are empty")]
    EmptyPools,
    #[error("unknown baseline: {0}")]
    UnknownBaseline(String),
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
    #[error("unknown attack kind: {0}")]
    UnknownAttack(String),
    #[error("missing checkpoint for strategy {0} (pass --train-inline to train it)")]
    MissingCheckpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
