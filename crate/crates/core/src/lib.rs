//! Codebook-prior enhancement for learned remote-sensing image compression.
//!
//! The crate implements a three-stage, decoder-side enhancement pipeline:
//!
//! 1. **Codebook learning** ([`vq`]): a vector-quantized adversarial
//!    autoencoder learns a discrete codebook of high-quality feature
//!    entries together with an encoder `E_H` and decoder `D_H`.
//! 2. **Code lookup** ([`lookup`]): a Transformer behind a fine-tuned
//!    low-quality encoder `E_L` predicts code indices for decoded
//!    (degraded) images, with the codebook and `D_H` frozen.
//! 3. **Prior fusion** ([`fusion`]): a hierarchical prior integration
//!    network queries multi-scale features of the frozen `D_H` through
//!    multi-head cross-attention and produces the enhanced image.
//!
//! The enhancement consumes only the baseline codec's decoded image, so the
//! transmitted bitstream is byte-identical with or without it.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod fusion;
pub mod lookup;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod train;
pub mod vq;

pub use data::ImageTensor;
pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod test_util;
