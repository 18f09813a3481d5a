use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error at position {position}: id {id} outside [0, {limit})")]
    Index {
        position: usize,
        id: usize,
        limit: usize,
    },

    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("time ordering violated: s={s} > t={t}")]
    Ordering { s: f64, t: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Numeric aborts get their own CLI exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
