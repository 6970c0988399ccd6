use std::path::PathBuf;

/// Errors raised by the detection library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("record {index} has a non-finite value")]
    NonFinite { index: usize },
    #[error("point {index} lies outside the grid range")]
    OutOfRange { index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("pillar has no points")]
    EmptyPillar,
    #[error("duplicate pillar at (ix={ix}, iy={iy})")]
    DuplicatePillar { ix: usize, iy: usize },
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{stage} stage failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// True for errors that signal a broken internal invariant rather than bad input.
    pub fn is_invariant(&self) -> bool {
        match self {
            Error::Invariant(_) => true,
            Error::Stage { source, .. } => source.is_invariant(),
            _ => false,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
