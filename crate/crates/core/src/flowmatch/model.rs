use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dropout::ConditionFlags;
use super::path::{ot_interpolate_batch, OtPathConfig};
use super::transcript::FRAME_RATE;
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::netlib::{
    CrossContext, Embedding, Linear, Transformer, TransformerConfig, VoicePromptEncoder,
    VoicePromptEncoderConfig,
};
use crate::odesolve::TapeField;
use crate::rng::Rng;
use crate::{Error, Result};

/// Large negative score for padded cross-attention keys.
const KEY_PAD: f64 = -1e9;

/// Conditioning for one sequence of `T` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// Frame-aligned token ids, length `T`.
    pub tokens: Vec<usize>,
    /// `[T, C]` context; masked frames are exactly zero.
    pub context: Tensor,
    /// `true` = frame to generate.
    pub mask: Vec<bool>,
    pub description: Option<Vec<usize>>,
    /// `[P, C]` prompt frames.
    pub voice_prompt: Option<Tensor>,
}

impl ConditionBundle {
    /// Builds the bundle from clean frames, zeroing the masked ones.
    pub fn new(tokens: Vec<usize>, frames: &Tensor, mask: Vec<bool>) -> Result<Self> {
        let (t, c) = frame_dims(frames)?;
        if tokens.len() != t || mask.len() != t {
            return Err(Error::shape(
                "condition bundle",
                format!(
                    "{t} frames, {} tokens, {} mask flags",
                    tokens.len(),
                    mask.len()
                ),
            ));
        }
        let mut context = frames.clone();
        for (f, &m) in mask.iter().enumerate() {
            if m {
                context.data_mut()[f * c..(f + 1) * c].fill(0.0);
            }
        }
        Ok(ConditionBundle {
            tokens,
            context,
            mask,
            description: None,
            voice_prompt: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn flags(&self) -> ConditionFlags {
        ConditionFlags {
            has_ctx: self.mask.iter().any(|&m| !m),
            has_vp: self.voice_prompt.is_some(),
            has_cap: self.description.is_some(),
        }
    }

    /// Replaces absent inputs by their pseudo forms: fully masked context,
    /// no voice prompt (the model substitutes 0.1 s of zeros) and an empty
    /// caption. Tokens are kept.
    pub fn with_flags(&self, flags: ConditionFlags) -> ConditionBundle {
        let mut b = self.clone();
        if !flags.has_ctx {
            b.mask.fill(true);
            b.context.data_mut().fill(0.0);
        }
        if !flags.has_vp {
            b.voice_prompt = None;
        }
        if !flags.has_cap {
            b.description = None;
        }
        b
    }

    /// The unconditional pass used for guidance.
    pub fn unconditional(&self) -> ConditionBundle {
        self.with_flags(ConditionFlags::NONE)
    }
}

fn frame_dims(frames: &Tensor) -> Result<(usize, usize)> {
    match frames.shape() {
        [t, c] => Ok((*t, *c)),
        s => Err(Error::shape(
            "frames",
            format!("expected [T, C], got {s:?}"),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioModelConfig {
    pub channels: usize,
    pub token_vocab: usize,
    pub transformer: TransformerConfig,
    pub time_scale: f64,
    /// Description vocabulary including its null token; 0 disables captions.
    #[serde(default)]
    pub description_vocab: usize,
    /// Token id used for an empty caption.
    #[serde(default)]
    pub null_description: usize,
    #[serde(default)]
    pub voice_prompt: Option<VoicePromptEncoderConfig>,
}

impl AudioModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        let mut errs = Vec::new();
        if self.channels == 0 || self.token_vocab == 0 {
            errs.push("channels and token_vocab must be >= 1".to_string());
        }
        let cross = self.description_vocab > 0 || self.voice_prompt.is_some();
        if cross != self.transformer.cross_attention {
            errs.push("transformer.cross_attention must be set exactly when captions or voice prompts are used".into());
        }
        if self.description_vocab > 0 && self.null_description >= self.description_vocab {
            errs.push("null_description must lie inside description_vocab".into());
        }
        if let Some(vp) = &self.voice_prompt {
            if vp.embed_dim != self.transformer.embed_dim {
                errs.push("voice prompt embed_dim must match the transformer".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Conditional vector field over frame sequences. The noisy frames and the
/// context are concatenated channel-wise and projected to the hidden size;
/// projected token embeddings are added; the flow-step embedding enters as
/// a prefix position of the transformer.
#[derive(Clone, Debug)]
pub struct AudioModel {
    pub config: AudioModelConfig,
    pub input: Linear,
    pub tokens: Embedding,
    pub token_proj: Linear,
    pub time_proj: Linear,
    pub body: Transformer,
    pub output: Linear,
    pub description: Option<Embedding>,
    pub voice_prompt: Option<VoicePromptEncoder>,
}

impl AudioModel {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &AudioModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.channels, config.transformer.embed_dim);
        let description = (config.description_vocab > 0).then(|| {
            Embedding::new(
                store,
                &format!("{name}.description"),
                config.description_vocab,
                d,
                rng,
            )
        });
        let voice_prompt = match &config.voice_prompt {
            Some(vp) => Some(VoicePromptEncoder::new(
                store,
                &format!("{name}.voice_prompt"),
                c,
                vp,
                rng,
            )?),
            None => None,
        };
        Ok(AudioModel {
            config: config.clone(),
            input: Linear::new(store, &format!("{name}.input"), 2 * c, d, rng),
            tokens: Embedding::new(store, &format!("{name}.tokens"), config.token_vocab, d, rng),
            token_proj: Linear::new(store, &format!("{name}.token_proj"), d, d, rng),
            time_proj: Linear::new(store, &format!("{name}.time_proj"), d, d, rng),
            body: Transformer::new(store, &format!("{name}.body"), &config.transformer, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, c, rng),
            description,
            voice_prompt,
        })
    }

    /// Hidden input `x_h` of shape `[B, T, D]` before the time prefix.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xt: Var,
        cond: &[ConditionBundle],
    ) -> Result<Var> {
        let shape = tape.shape(xt).to_vec();
        let (b, t, c) = match shape[..] {
            [b, t, c] => (b, t, c),
            _ => {
                return Err(Error::shape(
                    "assemble",
                    format!("x_t {shape:?}, expected [B, T, C]"),
                ))
            }
        };
        if c != self.config.channels || cond.len() != b {
            return Err(Error::shape(
                "assemble",
                format!(
                    "x_t {shape:?} with {} bundles and {} channels",
                    cond.len(),
                    self.config.channels
                ),
            ));
        }
        let mut ctx = Vec::with_capacity(b * t * c);
        let mut ids = Vec::with_capacity(b * t);
        for bundle in cond {
            if bundle.len() != t || bundle.context.shape() != [t, c] {
                return Err(Error::shape(
                    "assemble",
                    format!(
                        "bundle with {} tokens and context {:?} for T={t}",
                        bundle.len(),
                        bundle.context.shape()
                    ),
                ));
            }
            if let Some(&bad) = bundle
                .tokens
                .iter()
                .find(|&&k| k >= self.config.token_vocab)
            {
                return Err(Error::invalid(format!(
                    "token {bad} outside vocabulary {}",
                    self.config.token_vocab
                )));
            }
            ctx.extend_from_slice(bundle.context.data());
            ids.extend_from_slice(&bundle.tokens);
        }
        let ctx = tape.constant(Tensor::new(vec![b, t, c], ctx)?);
        let cat = tape.concat(&[xt, ctx], -1)?;
        let h = self.input.forward(tape, store, cat)?;
        let e = self.tokens.forward(tape, store, &ids, &[b, t])?;
        let e = self.token_proj.forward(tape, store, e)?;
        tape.add(h, e)
    }

    fn cross_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cond: &[ConditionBundle],
        t: usize,
    ) -> Result<Option<CrossContext>> {
        if !self.body.config.cross_attention {
            return Ok(None);
        }
        let d = self.config.transformer.embed_dim;
        let mut parts = Vec::with_capacity(cond.len());
        for bundle in cond {
            let mut seq = Vec::new();
            if let Some(enc) = &self.voice_prompt {
                let frames = match &bundle.voice_prompt {
                    Some(p) => p.clone(),
                    None => Tensor::zeros(&[(FRAME_RATE / 10).max(1), self.config.channels]),
                };
                let (p, c) = frame_dims(&frames)?;
                let f = tape.constant(frames.reshape(&[1, p, c])?);
                seq.push(enc.forward(tape, store, f)?);
            }
            if let Some(emb) = &self.description {
                let ids = match &bundle.description {
                    Some(ids) if !ids.is_empty() => ids.clone(),
                    _ => vec![self.config.null_description],
                };
                if let Some(&bad) = ids.iter().find(|&&k| k >= self.config.description_vocab) {
                    return Err(Error::invalid(format!(
                        "description token {bad} outside vocabulary"
                    )));
                }
                let n = ids.len();
                seq.push(emb.forward(tape, store, &ids, &[1, n])?);
            }
            parts.push(if seq.len() == 1 {
                seq[0]
            } else {
                tape.concat(&seq, 1)?
            });
        }
        let lens: Vec<usize> = parts.iter().map(|&p| tape.shape(p)[1]).collect();
        let s = *lens.iter().max().expect("non-empty batch");
        let mut padded = Vec::with_capacity(parts.len());
        for (&p, &l) in parts.iter().zip(&lens) {
            padded.push(if l < s {
                let z = tape.constant(Tensor::zeros(&[1, s - l, d]));
                tape.concat(&[p, z], 1)?
            } else {
                p
            });
        }
        let states = if padded.len() == 1 {
            padded[0]
        } else {
            tape.concat(&padded, 0)?
        };
        let key_mask = if lens.iter().all(|&l| l == s) {
            None
        } else {
            let tq = t + 1;
            let mut m = vec![0.0; cond.len() * tq * s];
            for (bi, &l) in lens.iter().enumerate() {
                for q in 0..tq {
                    m[(bi * tq + q) * s + l..(bi * tq + q + 1) * s].fill(KEY_PAD);
                }
            }
            Some(tape.constant(Tensor::new(vec![cond.len(), tq, s], m)?))
        };
        Ok(Some(CrossContext { states, key_mask }))
    }

    /// Predicted field `[B, T, C]` for noisy frames `xt` at flow steps `t: [B]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xt: Var,
        t: Var,
        cond: &[ConditionBundle],
    ) -> Result<Var> {
        let h = self.assemble(tape, store, xt, cond)?;
        let len = tape.shape(xt)[1];
        let te = tape.time_embed(t, self.config.transformer.embed_dim, self.config.time_scale)?;
        let te = self.time_proj.forward(tape, store, te)?;
        let cross = self.cross_context(tape, store, cond, len)?;
        let y = self.body.forward(tape, store, h, Some(te), cross)?;
        self.output.forward(tape, store, y)
    }

    /// Field bound to fixed conditioning, for the ODE solvers.
    pub fn field<'a>(
        &'a self,
        store: &'a ParamStore,
        cond: &'a [ConditionBundle],
    ) -> AudioField<'a> {
        AudioField {
            model: self,
            store,
            cond,
        }
    }
}

/// [`AudioModel`] with frozen conditioning, as an ODE right-hand side.
pub struct AudioField<'a> {
    pub model: &'a AudioModel,
    pub store: &'a ParamStore,
    pub cond: &'a [ConditionBundle],
}

impl TapeField for AudioField<'_> {
    fn eval_tape(&self, tape: &mut Tape, x: Var, t: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let ones = tape.constant(Tensor::ones(&[b]));
        let tb = tape.mul(ones, t)?;
        self.model.forward(tape, self.store, x, tb, self.cond)
    }
}

pub(crate) fn normal_like(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Draws `t ~ U[0, 1]` and `x0 ~ N(0, I)` per example and returns the masked
/// flow-matching loss of `model` on clean frames `x1: [B, T, C]`.
pub fn fm_batch_loss(
    tape: &mut Tape,
    model: &AudioModel,
    store: &ParamStore,
    x1: &Tensor,
    cond: &[ConditionBundle],
    path: &OtPathConfig,
    rng: &mut Rng,
) -> Result<super::MaskedLoss> {
    use rand::Rng as _;
    let b = x1.shape()[0];
    let ts: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
    let x0 = normal_like(x1.shape(), rng);
    let (xt, vt) = ot_interpolate_batch(&x0, x1, &ts, path)?;
    let xv = tape.constant(xt);
    let tv = tape.constant(Tensor::vector(ts));
    let pred = model.forward(tape, store, xv, tv, cond)?;
    let mask: Vec<bool> = cond.iter().flat_map(|c| c.mask.iter().copied()).collect();
    super::fm_masked_loss(tape, pred, &vt, &mask)
}
