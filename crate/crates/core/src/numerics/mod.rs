//! Deterministic numeric foundation: flat tensors, a counter-based RNG, a
//! reverse-mode tape over a closed primitive set, and a finite-difference
//! gradient checker. Everything upstream (models, attacks, losses) is built
//! from these pieces and inherits their bit-reproducibility.

pub mod fd;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use fd::{finite_diff_check, grad, value_and_grad, FdReport};
pub use rng::{tags, RngState};
pub use scalar::Scalar;
pub use tape::{backward_sweeps, Gradients, Tape, VarId};
pub use tensor::{
    l2_normalize, l2_normalize_slice, log_sum_exp, matmul, stable_softmax, transpose, Tensor,
};
