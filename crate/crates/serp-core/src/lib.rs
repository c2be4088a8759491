//! Self-supervised point-cloud representation learning at desk scale.
//!
//! A point cloud is corrupted by adding Gaussian noise to a handful of
//! local patches, and an autoencoder is trained to recover the clean
//! cloud. Three model families share the machinery here: a PointNet-style
//! per-point autoencoder, a patch-token transformer, and the transformer's
//! vector-quantized variant. The pretrained encoders are then finetuned
//! for shape classification against a from-scratch baseline.
//!
//! Everything is deterministic given a seed and a thread count; the data
//! parallel kernels (feature `parallel`, on by default) are written so
//! results are bitwise identical to the sequential fallback.

pub mod diffcore;
pub mod geometry;
pub mod losses;
pub mod pointnet;
pub mod transformer;
pub mod vq;
pub mod error;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
