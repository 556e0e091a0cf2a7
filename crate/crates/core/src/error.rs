use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dialogue {dialogue_id} turn {}: {message}", fmt_turn(.turn_index))]
    Record {
        dialogue_id: String,
        turn_index: Option<usize>,
        message: String,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("item database: {0}")]
    ItemDb(String),

    #[error("action syntax: {0}")]
    ActionSyntax(String),

    #[error("invalid probability {value} at position {index}")]
    Probability { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no goal annotations in corpus; derive synthetic goals first (e.g. `gen-corpus`)")]
    NoGoals,

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("missing value for slot `{0}`")]
    UnfilledSlot(String),

    #[error("session already terminated")]
    Terminated,

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(id: &str, turn: Option<usize>, message: impl Into<String>) -> Self {
        Error::Record {
            dialogue_id: id.to_string(),
            turn_index: turn,
            message: message.into(),
        }
    }
}

fn fmt_turn(turn: &Option<usize>) -> String {
    match turn {
        Some(t) => t.to_string(),
        None => "-".to_string(),
    }
}
