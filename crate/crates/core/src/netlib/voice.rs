use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::transformer::{Transformer, TransformerConfig};
use crate::diffcore::{ParamStore, Tape, Var};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoicePromptEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
}

impl Default for VoicePromptEncoderConfig {
    fn default() -> Self {
        VoicePromptEncoderConfig {
            layers: 3,
            heads: 4,
            embed_dim: 64,
            ffn_dim: 256,
        }
    }
}

/// Encodes voice-prompt frames into a sequence of the same length for use
/// as cross-attention keys/values. No pooling.
#[derive(Clone, Debug)]
pub struct VoicePromptEncoder {
    pub input: Linear,
    pub body: Transformer,
    pub channels: usize,
}

impl VoicePromptEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &VoicePromptEncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let tcfg = TransformerConfig {
            layers: config.layers,
            heads: config.heads,
            embed_dim: config.embed_dim,
            ffn_dim: config.ffn_dim,
            use_unet_skips: false,
            cross_attention: false,
            lora_rank: None,
        };
        Ok(VoicePromptEncoder {
            input: Linear::new(
                store,
                &format!("{name}.input"),
                channels,
                config.embed_dim,
                rng,
            ),
            body: Transformer::new(store, &format!("{name}.body"), &tcfg, rng)?,
            channels,
        })
    }

    /// `frames: [B, P, C]` → `[B, P, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let s = tape.shape(frames);
        if s.len() != 3 || s[1] == 0 || s[2] != self.channels {
            return Err(Error::shape(
                "voice_prompt_encode",
                format!("{s:?}, expected [B, P>=1, {}]", self.channels),
            ));
        }
        let h = self.input.forward(tape, store, frames)?;
        self.body.forward(tape, store, h, None, None)
    }
}
