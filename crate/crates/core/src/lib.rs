//! Parallel hierarchical transformer for multi-document summarization,
//! with paragraph-attention alignment at decoding time.

pub mod align;
pub mod config;
pub mod data;
pub mod decoding;
mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;
pub mod vocab;

pub use config::{ModelConfig, ModelSidecar};
pub use error::{Error, Result};
pub use model::{DecoderOutput, EncodedSource, Pht, Source, StepOutput};
pub use vocab::Vocabulary;
