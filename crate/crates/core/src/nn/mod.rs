//! Networks: tape-based reverse-mode differentiation, GraphConv stacks,
//! MLPs and joint-specialized heads.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;

use thiserror::Error;

pub use layers::{gnn_forward, Activation, GnnStack, GraphConvLayer, JsmlpHead, Linear, Mlp, NodeFeatureBatch, NodeFeatureBatchBuilder};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore};
pub use tape::{EdgeList, RowList, Tape, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("tape state error: {0}")]
    State(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
