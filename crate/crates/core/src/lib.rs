//! Two-class facial-expression CNN with Squeeze-and-Excitation and CBAM
//! attention, an image augmentation pipeline, an SGD-momentum training loop,
//! confusion-matrix metrics, and Grad-CAM heatmaps.
//!
//! Everything runs on the CPU with explicit per-layer backpropagation.

pub mod attention;
pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
