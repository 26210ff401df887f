//! Building blocks shared by the model families.
//!
//! Parameter containers are generic over their leaf type `P`: models store
//! `Tensor`s, a forward pass binds them to tape `Var`s with `map`, and the
//! model builder describes them as shapes before allocating anything.

mod attention;
mod embedding;
mod lstm;
mod positional;
mod transformer;

pub use attention::{causal_self_attention, self_attention, AttentionParams};
pub use embedding::{embed, output_logits, EmbeddingTable};
pub use lstm::{lstm_forward, LstmLayerParams};
pub use positional::PositionalEncoder;
pub use transformer::{transformer_layer, LayerNormParams, TransformerLayerParams};
