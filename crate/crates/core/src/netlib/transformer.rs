use serde::{Deserialize, Serialize};

use super::attention::{alibi_bias, MultiHeadAttention};
use super::layers::{FeedForward, LayerNorm, Linear};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub use_unet_skips: bool,
    pub cross_attention: bool,
    #[serde(default)]
    pub lora_rank: Option<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 4,
            heads: 4,
            embed_dim: 64,
            ffn_dim: 256,
            use_unet_skips: true,
            cross_attention: false,
            lora_rank: None,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("layers must be >= 1".to_string());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            errs.push(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.use_unet_skips && self.layers % 2 != 0 {
            errs.push(format!(
                "UNet skips need an even layer count, got {}",
                self.layers
            ));
        }
        if let Some(r) = self.lora_rank {
            if r == 0 || r >= self.embed_dim {
                errs.push(format!("lora_rank {r} must be in 1..{}", self.embed_dim));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Keys/values for cross-attention, shared by every layer.
#[derive(Clone, Copy, Debug)]
pub struct CrossContext {
    /// `[B, S, D]`, no positional information.
    pub states: Var,
    /// Optional additive `[B, T_q, S]` mask (0 for valid keys, large
    /// negative for padding); `T_q` includes the time-embedding position.
    pub key_mask: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        bias: &super::AlibiBias,
        cross: Option<CrossContext>,
    ) -> Result<Var> {
        let n = self.norm_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, Some(bias), None)?;
        let mut h = tape.add(x, a)?;
        if let (Some((norm, attn)), Some(ctx)) = (&self.cross, cross) {
            let n = norm.forward(tape, store, h)?;
            let c = attn.forward(tape, store, n, ctx.states, None, ctx.key_mask)?;
            h = tape.add(h, c)?;
        }
        let n = self.norm_ffn.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, n)?;
        tape.add(h, f)
    }
}

/// Pre-norm transformer encoder with symmetric ALiBi self-attention bias,
/// optional UNet-style skips between mirrored layers, optional
/// cross-attention in every layer, and an optional flow-step embedding
/// prepended as an extra sequence position.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub layers: Vec<TransformerLayer>,
    /// Combines `[state, mirrored state]` (2D → D) for the upper half.
    pub skips: Vec<Linear>,
    pub final_norm: LayerNorm,
}

impl Transformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &TransformerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{name}.layer{i}");
            let cross = if config.cross_attention {
                Some((
                    LayerNorm::new(store, &format!("{p}.norm_cross"), d),
                    MultiHeadAttention::new(store, &format!("{p}.cross"), d, config.heads, rng)?,
                ))
            } else {
                None
            };
            layers.push(TransformerLayer {
                norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d),
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, config.heads, rng)?,
                cross,
                norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, config.ffn_dim, rng),
            });
        }
        let skips = if config.use_unet_skips {
            (0..config.layers / 2)
                .map(|i| Linear::new(store, &format!("{name}.skip{i}"), 2 * d, d, rng))
                .collect()
        } else {
            Vec::new()
        };
        let mut t = Transformer {
            config: config.clone(),
            layers,
            skips,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
        };
        if let Some(r) = config.lora_rank {
            t.attach_lora(store, r, rng)?;
        }
        Ok(t)
    }

    /// Sets every skip combiner to pass the incoming state through and
    /// ignore the mirrored one.
    pub fn init_skips_identity(&self, store: &mut ParamStore) {
        let d = self.config.embed_dim;
        for s in &self.skips {
            let mut w = Tensor::zeros(&[2 * d, d]);
            for i in 0..d {
                w.data_mut()[i * d + i] = 1.0;
            }
            store.get_mut(s.w).value = w;
            if let Some(b) = s.b {
                store.get_mut(b).value.data_mut().fill(0.0);
            }
        }
    }

    /// Adds adapters to the query/key/value projections of every
    /// self-attention layer. Returns the number of adapter weights added.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        rng: &mut Rng,
    ) -> Result<usize> {
        if rank == 0 || rank >= self.config.embed_dim {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} must be in 1..{}",
                self.config.embed_dim
            )));
        }
        let mut n = 0;
        for layer in &mut self.layers {
            for proj in layer.attn.input_projections_mut() {
                n += proj.attach_lora(store, rank, rng)?;
            }
        }
        self.config.lora_rank = Some(rank);
        Ok(n)
    }

    /// Names of the adapter parameters.
    pub fn lora_param_names(&self, store: &ParamStore) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            for proj in [&layer.attn.q, &layer.attn.k, &layer.attn.v] {
                if let Some(l) = &proj.lora {
                    names.push(store.get(l.a).name.clone());
                    names.push(store.get(l.b).name.clone());
                }
            }
        }
        names
    }

    /// `x: [B, T, D]`, `time: [B, D]`. Returns `[B, T, D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        time: Option<Var>,
        cross: Option<CrossContext>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.embed_dim {
            return Err(Error::shape(
                "transformer",
                format!("input {shape:?}, embed_dim {}", self.config.embed_dim),
            ));
        }
        if cross.is_some() && !self.config.cross_attention {
            return Err(Error::invalid(
                "cross-attention context supplied but cross_attention is off",
            ));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let mut h = x;
        if let Some(te) = time {
            if tape.shape(te) != [b, d] {
                return Err(Error::shape(
                    "transformer",
                    format!("time embedding {:?}, expected [{b}, {d}]", tape.shape(te)),
                ));
            }
            let te = tape.reshape(te, &[b, 1, d])?;
            h = tape.concat(&[te, h], 1)?;
        }
        let len = tape.shape(h)[1];
        let bias = alibi_bias(len, self.config.heads);
        let half = self.layers.len() / 2;
        let mut stack = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if self.config.use_unet_skips && !self.skips.is_empty() {
                if i < half {
                    stack.push(h);
                } else {
                    let mirror = stack.pop().expect("skip stack underflow");
                    let cat = tape.concat(&[h, mirror], -1)?;
                    h = self.skips[i - half].forward(tape, store, cat)?;
                }
            }
            h = layer.forward(tape, store, h, &bias, cross)?;
        }
        h = self.final_norm.forward(tape, store, h)?;
        if time.is_some() {
            h = tape.slice(h, 1, 1, t)?;
        }
        Ok(h)
    }
}

/// Attaches rank-`rank` adapters to every self-attention input projection
/// and freezes everything else in `store`. Returns the trainable count.
/// Callers may unfreeze extra parameters afterwards.
pub fn lora_wrap(
    model: &mut Transformer,
    store: &mut ParamStore,
    rank: usize,
    rng: &mut Rng,
) -> Result<usize> {
    model.attach_lora(store, rank, rng)?;
    store.set_all_trainable(false);
    for name in model.lora_param_names(store) {
        let id = store.id(&name).expect("adapter registered");
        store.get_mut(id).trainable = true;
    }
    Ok(store.trainable_count())
}
