//! Dense linear algebra, stable softmax and deterministic top-k.
//!
//! Every multiply-add performed by the kernels in [`matrix`] is tallied in a
//! thread-local counter (see [`flops`]) so that cost models can be checked
//! against the code that actually runs.

pub mod flops;
pub mod matrix;
mod softmax;
mod topk;

pub use matrix::{dot, matmul, vecmat, Matrix};
pub use softmax::{softmax, softmax_in_place};
pub use topk::{topk_indices, topk_scored, ScoredIndex};
