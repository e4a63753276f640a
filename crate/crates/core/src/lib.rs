//! Budgeted multi-modal transformer with learned token routing, plus a
//! mmWave vehicle-to-infrastructure scene simulator to train it on.

pub mod autograd;
pub mod channel;
pub mod error;
pub mod flops;
pub mod harness;
pub mod keepratio;
pub mod model;
pub mod optim;
pub mod params;
pub mod routing;
pub mod scene;
pub mod tensor;
pub mod tokenizers;

pub use autograd::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
