//! Federated multi-modal multi-task training with knowledge injection into a
//! frozen foundation-model stub.
//!
//! Clients train modality-specific encoders and task-specific decoders on
//! private shards. A server averages them, then injects the averaged encoders
//! into a frozen backbone through a feature-alignment map and low-rank
//! adapters mixed by an attention router over task and modality descriptions.

pub mod autodiff;
pub mod client;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod federation;
pub mod foundation;
pub mod gradcheck;
pub mod modality;
pub mod nn;
pub mod optim;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod verify;
pub mod wire;

pub use autodiff::{Gradients, Var};
pub use error::{Error, ParseError, Result};
pub use modality::{ModalityKind, Sample, TaskBatch, TaskId, TaskRole, TaskSpec};
pub use param::{ParamId, Parameter, StoreId};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type ParamStore = param::ParamStore<f64>;
pub type ParamStore32 = param::ParamStore<f32>;
pub type Optimizer = optim::Optimizer<f64>;
pub type Optimizer32 = optim::Optimizer<f32>;
