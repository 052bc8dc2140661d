//! Discrete speech token toolkit.
//!
//! Turns continuous speech-embedding matrices into discrete token streams
//! with trainable quantizers (k-means, grouped VQ, residual VQ), applies a
//! token-level augmentation policy, maps tokens back to dense features for
//! downstream models, and measures token quality.
//!
//! Module map:
//! - [`embio`]: `.dtek` embedding files, JSON-lines manifests, subset sampling
//! - [`quantize`]: codebook training and assignment, `.dtcb` codebook files
//! - [`tokens`]: token sequences, run-length codec, bandwidth, `.dtts` files
//! - [`frontend`]: token embedding tables, group fusion, rate resampling
//! - [`augment`]: time warp/mask, embedding mask, noise, frame duplication
//! - [`metrics`]: PNMI, codebook usage, reconstruction error

pub mod augment;
pub mod embio;
mod error;
pub mod frontend;
pub(crate) mod io_util;
pub mod metrics;
pub mod quantize;
pub mod tokens;

pub use error::{Error, Result};
