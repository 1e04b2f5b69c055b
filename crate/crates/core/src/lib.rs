//! Trainable image data hiding with inverse gradient attention.
//!
//! A k-bit message is compressed by a small MLP codec, spread over the cover
//! image by a convolutional encoder whose input is the cover weighted by an
//! attention mask, passed through a distortion channel, and recovered by a
//! convolutional decoder followed by the codec's inverse MLP. The attention
//! mask is built from the gradient of the message reconstruction loss with
//! respect to the cover pixels: pixels the loss is least sensitive to get the
//! largest weights.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod diff;
pub mod distortions;
pub mod error;
pub mod metrics;
pub mod msgcodec;
pub mod nets;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
