//! Training-time activation compression with a sparse bitmap stash format.
//!
//! During the forward pass each layer's input activation is handed to a
//! pluggable stash (dense, bitmap-compressed, pruned, half-precision,
//! checkpoint-every-m). The backward pass restores the stashed tensors to
//! compute gradients. A byte-exact ledger accounts for every live stash
//! payload so memory claims can be asserted instead of sampled.

pub mod analyzer;
pub mod bitmap;
pub mod dataset;
pub mod error;
pub mod f16;
pub mod footprint;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod stash;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, Precision};
