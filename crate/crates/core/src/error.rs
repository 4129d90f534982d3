use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty graph")]
    EmptyGraph,

    #[error("line {line}: self-loop on node {node} is not allowed")]
    SelfLoop { line: usize, node: u64 },

    #[error("node {node} has no followees, so it has no opinion sources")]
    NoFollowees { node: NodeId },

    #[error("node {node} is out of range for a graph with {node_count} nodes")]
    NodeOutOfRange { node: NodeId, node_count: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    /// Carries the last iterate so callers can inspect how far the method got.
    #[error("{method} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { method: &'static str, iterations: usize, residual: f64, last: Vec<f64> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("node {node} is not part of the cascade")]
    NotInCascade { node: NodeId },

    #[error("empty predecessor set for node {node}")]
    EmptyPredecessors { node: NodeId },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("trace event {index}: unknown node id {id}")]
    UnknownTraceNode { index: usize, id: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
