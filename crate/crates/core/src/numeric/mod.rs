// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors, a matrix-level gradient tape, and a finite-difference oracle.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff, DEFAULT_STEP};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;

