//! Structured pruning for small transformer-like models.
//!
//! The crate is organised bottom-up: [`tensor`] holds the dense kernels,
//! [`model`] the toy decoder and its file format, [`importance`] the unit and
//! layer scores, [`allocation`] the closed-form masks and sparsity allocators,
//! [`admm`] the alternating layer-pair solver, [`eval`] the loss, perplexity
//! and memory accounting, and [`pipeline`] ties them together for the CLI.
//! [`oracle`] contains brute-force and iterative reference solvers used to
//! check the closed forms; nothing in the pruning path depends on it.

// parameter checks are written `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod allocation;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod fsutil;
pub mod importance;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DenseMatrix, Rng};
