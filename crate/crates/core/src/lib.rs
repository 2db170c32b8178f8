//! Sequence transduction through soft fertility and separable-permutation
//! alignments, trained end to end.
//!
//! Layers:
//! - [`fertility`]: expected copy alignments `F̄` conditioned on output length;
//! - [`reordering`]: expected permutation matrices `R̄` from a CYK-style
//!   inside pass over permutation trees;
//! - [`autodiff`]: a reverse-mode tape with both DPs as primitives;
//! - [`model`], [`training`], [`inference`]: the network, its objective and
//!   decoding (optionally grammar-constrained, see [`grammar`]);
//! - [`oracle`] and [`checks`]: enumeration baselines and self-checks.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod fertility;
pub mod grammar;
pub mod inference;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod reordering;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{DecoderVariant, Model, ModelConfig, Order};
pub use tensor::Array;
pub use training::{ExperimentConfig, TrainConfig};
