//! Dense `f64` tensors, a reverse-mode tape, AdamW and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use graph::{gelu_value, sigmoid_value, AttentionBlock, AttentionLayout, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{truncated_normal, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
