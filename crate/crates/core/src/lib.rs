//! Rank-revealing QR initialization for dual low-rank adapters.
//!
//! - [`linalg`]: dense matrices, column-pivoted QR, Jacobi SVD, PCA.
//! - [`adapter`]: adapter initialization, residual freezing, forward and merge.
//! - [`diagnostics`]: effective rank, subspace similarity, cosine and norm statistics.
//! - [`train`]: toy domain-shift task, manual backprop, AdamW, gradient checks.

pub mod adapter;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod train;

pub use adapter::{build_dual_layer, DualAdapterLinear, InitStrategy, LoraAdapter};
pub use error::{Error, Result};
pub use linalg::Matrix;
