//! Causal neural language models (Transformer, LSTM, and a Transformer
//! stack cascaded into LSTM layers) on a small reverse-mode autodiff core,
//! with training, perplexity evaluation and N-best reranking.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, Result};
pub use model::{Carry, Family, InferenceMode, LanguageModel, ModelConfig, ModelParams};
pub use tape::{Mask, Tape, Var};
pub use tensor::{Real, Tensor};
