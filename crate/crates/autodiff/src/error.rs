use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf `{name}` is not bound in the feed")]
    UnboundLeaf { name: String },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    LossNotScalar { node: usize, shape: Vec<usize> },
    #[error("`{name}` names an interior node; gradients are only reported for leaves")]
    NotALeaf { name: String },
    #[error("no leaf named `{name}`")]
    UnknownName { name: String },
    #[error("forward pass is not deterministic (two evaluations differ by {max_diff:e})")]
    NonDeterministic { max_diff: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}
