//! Core library for UNet-GNN semantic segmentation: a small reverse-mode
//! tensor engine, a k-nearest-neighbor graph bottleneck over warped grid
//! coordinates, the encoder/decoder model, losses, metrics, and data tooling.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, VarId};
pub use tensor::{Real, Tensor};
