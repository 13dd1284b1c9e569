//! Order-preserving neural message hiding.
//!
//! A secret bit string is packed into multi-bit elements, cut into equal-length
//! segments and encoded per segment by an MLP channel coder with learned
//! positional embeddings and global self-attention. Windowed cross-attention
//! fuses the encoded message with image features, and a residual head produces
//! the stego image. A windowed-attention extractor plus a mirrored segment
//! decoder recovers the bits.
//!
//! Crate map:
//! - [`tensor`]: dense tensors, reverse-mode tape, Adam, checkpoints, gradient checks
//! - [`layout`]: bit packing, segmentation, capacity arithmetic, message files
//! - [`model`]: concealment and recovery networks
//! - [`train`]: losses, metrics, training loop and evaluation
//! - [`harness`]: datasets, image export, positional-embedding spectra, config files

pub mod error;
pub mod harness;
pub mod layout;
pub mod model;
pub mod train;
pub mod tensor;

pub use error::{Result, StegoError};
