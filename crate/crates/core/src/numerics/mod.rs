//! Dense `f64` tensors, reverse-mode differentiation and Adam.

mod adam;
pub mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, NodeId, GATHER_ZERO};
pub use tensor::{
    gelu, layer_norm_rows, log_softmax_rows, matmul, matmul_nt, matmul_tn, softmax_rows, Tensor,
    LAYER_NORM_EPS,
};
