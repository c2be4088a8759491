//! Minimal reverse-mode differentiable core: tensors, a per-call graph,
//! layers, AdamW, and finite-difference gradient verification.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{finite_diff_check, FiniteDiffOpts};
pub use graph::{Graph, Var};
pub use layers::{sample_normal, AttentionBlock, Init, Linear, LayerNorm, Mlp, SharedMlp, LN_EPS};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Param, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
