use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    #[error("duplicate parameter path `{0}`")]
    DuplicatePath(String),

    #[error("unknown parameter path `{0}`")]
    UnknownPath(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
