// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod baselines;
pub mod cli;
pub mod error;
pub mod eval;
pub mod models;
pub mod numeric;
mod parallel;
pub mod relevancy;
pub mod segmask;

pub use error::{Error, Result};
