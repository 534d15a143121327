//! Minimal differentiable tensor substrate.
//!
//! Dense row-major tensors over `f32`/`f64`, a reverse-mode autodiff graph,
//! the attention and feed-forward building blocks, an AdamW optimizer and a
//! one-cycle learning-rate schedule. Training runs in `f32`; `f64` exists for
//! finite-difference gradient verification.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub(crate) mod kernels;

mod real;

pub use attention::{feed_forward, multi_head_attention, AttnVars, FfnVars};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
