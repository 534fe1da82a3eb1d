use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("goal is unreachable from the current state")]
    Unreachable,

    #[error("unsupported task template `{0}`")]
    UnsupportedTemplate(String),

    #[error("could not decode an answer from `{0}`")]
    Unparseable(String),

    #[error("no confusion matrix is consistent with {0}")]
    Inconsistent(String),

    #[error("feasible task set is empty")]
    EmptyFeasibleSet,

    #[error("trajectory has no steps")]
    EmptyTrajectory,

    #[error("ragged input: expected vectors of length {expected}, found {found} at index {index}")]
    RaggedInput {
        expected: usize,
        found: usize,
        index: usize,
    },

    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),

    #[error("could not sample a feasible start for task `{0}`")]
    NoFeasibleStart(String),

    #[error("environment fault injected during rollout")]
    FaultInjected,

    #[error("record failed validation: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),

    #[error("schema violation on line {line}: {}", .violations.join("; "))]
    SchemaViolation { line: usize, violations: Vec<String> },

    #[error("no trajectories left after success filtering")]
    EmptyAfterFilter,

    #[error("evaluation requires at least one episode per task and one task")]
    EmptyEvaluation,

    #[error("malformed policy artifact: {0}")]
    BadArtifact(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
