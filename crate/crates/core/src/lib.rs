//! Underwater image enhancement with a conditional network (Fourier gating and
//! multi-scale convolutional attention) steering a per-pixel primary network
//! through per-layer scale/shift modulation.
//!
//! The crate covers the whole desk-scale pipeline: physics-based pair
//! synthesis, forward and backward passes written by hand, Charbonnier and
//! perceptual losses, Adam with a cyclic schedule, checkpoints, and the
//! full-reference and no-reference quality metrics.

pub mod checkpoint;
pub mod conditional;
pub mod degradation;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod primary;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use imaging::ImageTensor;
pub use model::{Model, ModelConfig};
pub use weights::WeightStore;
