//! Minimal reverse-mode automatic differentiation and network building
//! blocks: a growable tape of tensor operations, GRU cells, parameter
//! initialization, the Adam optimizer, and checkpoint serialization.
//!
//! The tape records every forward operation; [`tape::Tape::backward`]
//! replays them once in reverse, accumulating gradients into the leaves.
//! All arithmetic is `f64`: training at this scale is CPU-bound on small
//! matrices, and double precision lets the same build serve gradient
//! checks without a precision switch.

pub mod adam;
pub mod checkpoint;
pub mod gru;
pub mod init;
pub mod tape;
pub mod tensor;

pub use adam::{clip_global_norm, Adam, AdamState};
pub use checkpoint::NamedTensors;
pub use gru::{GruLayer, GruLayerNodes, GruStack, GruStackNodes};
pub use tape::{Node, Padding, Tape};
pub use tensor::Tensor;
