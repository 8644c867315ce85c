use thiserror::Error;

/// Errors raised across the unmixing toolkit.
#[derive(Debug, Error)]
pub enum UnmixError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("degenerate column {0}: all entries are zero")]
    DegenerateColumn(usize),

    #[error("degenerate subspace: data rank {rank} is below the requested {requested} endmembers")]
    DegenerateSubspace { rank: usize, requested: usize },

    #[error("divergence in factor {factor} at iteration {iteration}: non-finite value produced")]
    Divergence { factor: &'static str, iteration: usize },

    #[error("Armijo search stalled on factor {factor} at iteration {iteration} after {shrinks} step reductions")]
    ArmijoStall {
        factor: &'static str,
        iteration: usize,
        shrinks: usize,
    },

    #[error("missing graph: variant {0} needs a neighbourhood graph")]
    MissingGraph(&'static str),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("empty seed set for endmember {0}")]
    EmptySeed(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, UnmixError>;

impl UnmixError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        UnmixError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
