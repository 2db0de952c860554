//! Convolutional image classifier with a channel feature-attention block,
//! built on a small reverse-mode autodiff engine over NHWC tensors.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
mod kernels;
pub mod model;
pub mod tensor;
pub mod train;

pub use attention::{fab_forward, gate_stats, FabActivations, FabParams, GateStats};
pub use autodiff::{GradientMap, NodeId, OpKind, Tape};
pub use error::{Error, Result};
pub use model::{ConvBlockSpec, Model, ModelConfig};
pub use tensor::{Shape4, Tensor};
