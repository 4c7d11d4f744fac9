//! Minimal tensor engine with reverse-mode differentiation and the siamese
//! spatio-temporal graph convolutional network built on it.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use model::{count_parameters, BlockSpec, ForwardMode, GaitModel, ModelConfig, SiameseStgcn};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{AdjacencyData, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward: {0}")]
    Backward(String),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error("invalid model config: {0}")]
    Config(String),
}
