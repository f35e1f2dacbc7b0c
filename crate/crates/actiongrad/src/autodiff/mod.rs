//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Design goals, in order: correctness (every operation is checked against
//! central finite differences in the test suite), determinism (pure f64, no
//! threads, fixed reduction order), and enough throughput on one CPU core for
//! the toy-scale models in this crate. The tape is rebuilt for every forward
//! pass; nothing is cached across calls.

mod adam;
mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_param_step, AdamConfig, AdamState};
pub use checkpoint::{load_tensors, save_tensors, NamedTensor};
pub use mlp::{
    binding_grads, mlp_eval, mlp_forward, pack_mlp, unpack_mlp, Activation, MlpBinding, MlpParams,
};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
