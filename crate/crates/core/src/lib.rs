//! Latticed multi-level multi-branch dilated-convolution fusion ("Fluff")
//! together with the numerical kernels, a small SSD-style detection scaffold,
//! static architecture analysis and a synthetic multi-scale dataset.
//!
//! All tensors use the batch, channel, height, width layout.

pub mod analyzer;
pub mod detector;
mod error;
pub mod fluff;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tensor_file;

pub use error::{Error, Result};
pub use fluff::{FluffConfig, FluffParams, FusionKind};
pub use rng::{seeded_rng, DetRng};
pub use tensor::{Element, Shape, Tensor};
