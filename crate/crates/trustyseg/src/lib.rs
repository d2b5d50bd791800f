//! Open-vocabulary segmentation head with a trusty token.
//!
//! The library matches frozen text and image embeddings through a small
//! attention decoder. A learnable trusty token is appended to the class
//! tokens; its output map estimates, per pixel, the probability of belonging
//! to a seen class, and at inference that map reweighs the per-class score
//! maps so that unseen classes are not drowned out by seen ones.
//!
//! Everything runs on a self-contained double-precision tensor core with
//! reverse-mode differentiation; no external ML framework is involved.

pub mod embeddings;
pub mod error;
pub mod harness;
pub mod head;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod tensor_file;

pub use error::{Error, Result};
pub use tensor::Tensor;
