//! Structure-aware melody infilling: bar tokens, phrase structure, a
//! context-selecting encoder-decoder, training, decoding and melody metrics.
//!
//! Numeric code is generic over [`Scalar`]; `f32` and `f64` both work.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod infill;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod structure;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
