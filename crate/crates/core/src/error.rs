use thiserror::Error;

pub type Result<T> = std::result::Result<T, LlpError>;

#[derive(Debug, Error)]
pub enum LlpError {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle bound exceeded: search space {size} > {bound}")]
    OracleBoundExceeded { size: f64, bound: f64 },

    #[error("infeasible marginals: n * z is not integral")]
    InfeasibleMarginals,

    #[error("sinkhorn diverged at iteration {iteration}")]
    SinkhornDiverged { iteration: usize },

    #[error("bag {bag}: {source}")]
    Bag {
        bag: usize,
        #[source]
        source: Box<LlpError>,
    },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("tape does not end in a scalar loss node")]
    NotScalarTerminated,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LlpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LlpError::InvalidArgument(msg.into())
    }

    pub(crate) fn in_bag(self, bag: usize) -> Self {
        LlpError::Bag {
            bag,
            source: Box::new(self),
        }
    }
}
