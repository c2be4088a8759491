//! Point-cloud containers and deterministic geometric kernels.

mod cloud;
mod fps;
mod knn;
mod patch;
mod perturb;

pub use cloud::{dist2, PointCloud};
pub use fps::{downsample, fps, fps_from_start};
pub use knn::{knn, knn_indices};
pub use patch::{tokenize, PatchSet, PatchStats};
pub use perturb::{perturb, perturb_with, PerturbCenters, PerturbationRecord};
