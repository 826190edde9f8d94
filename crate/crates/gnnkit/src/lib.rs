//! Message-passing graph neural networks with smoothness diagnostics,
//! structural-complexity measures, generalization-bound evaluation, and
//! structural-entropy regularization.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - dense/CSR kernels, spectral norm, symmetric eigensolver
//! * [`error`] - the crate-wide error type
//! * [`graph`] - graph representation, normalized operators, Dirichlet energy
//! * [`autodiff`] - reverse-mode tape over dense matrices
//! * [`models`] - GCN, GAT, and Graph Transformer forward passes
//! * [`complexity`] - effective-edge counts and generalization bounds
//! * [`ser`] - structural-entropy regularization
//! * [`train`] - optimizer, splits, and the training loop
//! * [`experiments`] - edge/λ sweeps, ablations, paired comparisons
//! * [`data_io`] - dataset bundles, checkpoints, CSV/JSONL reports

// Kernels index rows and columns explicitly to mirror the usual
// linear-algebra notation; iterator rewrites would obscure them.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod complexity;
pub mod data_io;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod models;
pub mod ser;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
