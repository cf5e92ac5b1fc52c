use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("non-contiguous years: {0}")]
    NonContiguousYears(String),
    #[error("municipality {id} has no population for year {year}")]
    MissingYear { id: String, year: i32 },
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("invalid position: {0}")]
    InvalidPosition(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no pairs retained: {0}")]
    NoPairsRetained(String),
    #[error("empty window: {0}")]
    EmptyWindow(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("non-finite residual at parameters {0:?}")]
    NonFiniteResidual(Vec<f64>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("simulation diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
}

impl Error {
    /// True for errors caused by bad input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFiniteResidual(_) | Error::Diverged { .. }
        )
    }
}
