//! Vision Transformer blocks with depth-wise convolution bypass branches.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and its primitive ops.
//! * [`nn`]: patch embedding, attention, feed-forward and normalization layers.
//! * [`bypass`]: the depth-wise convolution shortcut spanning groups of blocks.
//! * [`model`]: classifier assembly, complexity accounting and checkpoints.
//! * [`data`]: CIFAR-10 binary loading, a synthetic dataset and batching.
//! * [`train`]: loss, AdamW, learning-rate schedule, training loop and
//!   gradient checking.

pub mod bypass;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
