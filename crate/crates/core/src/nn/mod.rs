//! Minimal CPU inference engine: rank-4 tensors, the layer kinds the challenge
//! models need, a graph executor and exact params/MACs accounting.

mod graph;
pub mod ops;
mod tensor;
pub mod weights;

use thiserror::Error;

pub use graph::{Form, GlobalGate, GraphBuilder, GraphInput, ModelGraph, Node, Op, TensorMap, WeightVisitor, WeightVisitorMut};
pub(crate) use graph::{visit_conv, visit_conv_mut};
pub use ops::ConvSpec;
pub use tensor::{Shape, Tensor};
pub use weights::{WeightSet, WeightTensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("not divisible: {0}")]
    NotDivisible(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("tensor data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("missing graph input `{0}`")]
    MissingInput(String),
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("weight set mismatch: missing {missing:?}, unexpected {extra:?}")]
    WeightMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("weight `{name}` has dims {got:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced at `{0}`")]
    NonFinite(String),
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(detail: String) -> Self {
        NnError::ShapeMismatch {
            node: String::new(),
            detail,
        }
    }

    /// Attaches a node id to errors raised without one.
    pub(crate) fn at_node(self, id: &str) -> Self {
        match self {
            NnError::ShapeMismatch { node, detail } if node.is_empty() => NnError::ShapeMismatch {
                node: id.to_string(),
                detail,
            },
            NnError::NotDivisible(m) => NnError::NotDivisible(format!("`{id}`: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
