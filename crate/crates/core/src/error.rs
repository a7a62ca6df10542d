use thiserror::Error;

pub type Result<T, E = DinError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DinError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate input in {op}: norm {norm:e} is below {eps:e}")]
    Degenerate { op: &'static str, norm: f64, eps: f64 },

    #[error("index {index} out of range for length {len} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("sampling error: cell (class {class}, domain {domain}) has {available} examples, {requested} requested")]
    Sampling {
        class: usize,
        domain: usize,
        available: usize,
        requested: usize,
    },

    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("missing {what} for class {class}")]
    Lookup { what: &'static str, class: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DinError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DinError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DinError::Config(_) | DinError::Parse { .. } => 2,
            _ => 1,
        }
    }
}
