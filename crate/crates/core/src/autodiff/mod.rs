//! Differentiation machinery for the local experts.
//!
//! [`graph`] is a small static-topology tensor graph with a reverse sweep.
//! [`tape`] lays a fully connected network onto such a graph together with its
//! forward input-derivative "jet" (first and diagonal second derivatives), so that
//! losses built from network derivatives can be differentiated with respect to the
//! parameters in one reverse pass.

pub mod graph;
pub mod tape;

use thiserror::Error;

pub use graph::{Activation, Graph, GraphBuilder, NodeId};
pub use tape::{backward, build_tape, forward_jet, Architecture, Jet, Tape, TapeMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("zero-sized tensor {rows}x{cols}")]
    ZeroSized { rows: usize, cols: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown slot {0}")]
    UnknownSlot(usize),
    #[error("activation derivative of order {0} is not available on the reverse sweep")]
    DerivativeOrder(u8),
    #[error("weighted sum needs at least one term")]
    EmptySum,
    #[error("backward called before the forward pass")]
    NotExecuted,
    #[error("node {0} is not a scalar loss of this tape")]
    BadSeed(NodeId),
    #[error("expected {expected} gradient buffers, found {found}")]
    GradientSlots { expected: usize, found: usize },
    #[error("unsupported activation `{0}`")]
    UnsupportedActivation(String),
    #[error("invalid architecture {sizes:?}: {reason}")]
    Architecture { sizes: Vec<usize>, reason: &'static str },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("non-finite input at point {point}, coordinate {coord}")]
    NonFiniteInput { point: usize, coord: usize },
    #[error("non-finite parameter in tensor {tensor} at flat index {index}")]
    NonFiniteParam { tensor: usize, index: usize },
    #[error("tape mode {0} does not provide this operation")]
    Mode(&'static str),
    #[error("parameters do not match the tape architecture")]
    ParamMismatch,
}
