//! Model architectures.

mod attention;
mod layers;
mod mlp;
mod time;
mod transformer;
mod voice;

pub use attention::{alibi_bias, alibi_slopes, AlibiBias, MultiHeadAttention};
pub use layers::{Embedding, FeedForward, LayerNorm, Linear, Lora};
pub use mlp::{MlpBound, MlpField, MlpFieldConfig};
pub use time::{sinusoidal_embed, sinusoidal_embed_scaled, DEFAULT_TIME_SCALE};
pub use transformer::{lora_wrap, CrossContext, Transformer, TransformerConfig, TransformerLayer};
pub use voice::{VoicePromptEncoder, VoicePromptEncoderConfig};

#[cfg(test)]
mod tests;
