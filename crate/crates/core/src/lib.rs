//! X-Net: a depthwise separable encoder-decoder for binary lesion
//! segmentation with a non-local feature similarity module, together with the
//! reverse-mode autodiff engine, data pipeline and training loop it runs on.

pub mod data;
pub mod error;
pub mod fsm;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod pgm;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{Arch, Model, ModelConfig};
pub use param::{Module, Param};
pub use tensor::{Scalar, Tensor};
