//! Two-branch contrastive embedder.
//!
//! A sequence branch maps `[T, C]` frames and a text branch maps description
//! token lists into a shared unit sphere. Training uses the symmetric
//! InfoNCE objective with a learnable temperature; trained encoders rank
//! generated candidates against a description.

mod loss;
mod retrieval;
mod train;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::netlib::{Embedding, Linear, Transformer, TransformerConfig};
use crate::rng::Rng;
use crate::{Error, Result};

pub use loss::contrastive_loss;
pub use retrieval::{rerank, retrieval_metrics, Rerank, RetrievalReport, RECALL_KS};
pub use train::{train_joint_embed, JointEmbedTraining, TrainPair};

/// Candidates per prompt for sound generation.
pub const RERANK_K_SOUND: usize = 32;
/// Candidates per prompt for description-conditioned speech.
pub const RERANK_K_SPEECH: usize = 8;

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointEmbedConfig {
    pub channels: usize,
    pub description_vocab: usize,
    /// Width of the shared embedding space.
    pub embed_dim: usize,
    pub sequence: TransformerConfig,
    pub text: TransformerConfig,
    pub tau_init: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Validation A2T@10 is measured every this many steps.
    pub eval_every: usize,
}

impl JointEmbedConfig {
    pub fn new(channels: usize, description_vocab: usize) -> Self {
        let small = TransformerConfig {
            layers: 2,
            heads: 2,
            embed_dim: 32,
            ffn_dim: 64,
            use_unet_skips: false,
            cross_attention: false,
            lora_rank: None,
        };
        JointEmbedConfig {
            channels,
            description_vocab,
            embed_dim: 32,
            sequence: small.clone(),
            text: small,
            tau_init: 1.0,
            lr: 3e-3,
            steps: 400,
            batch: 32,
            eval_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.channels == 0 || self.description_vocab == 0 || self.embed_dim == 0 {
            errs.push("channels, description_vocab and embed_dim must be >= 1".to_string());
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            errs.push(format!(
                "tau_init {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau_init
            ));
        }
        if !(self.lr > 0.0) {
            errs.push(format!("lr {} must be > 0", self.lr));
        }
        if self.batch < 2 || self.eval_every == 0 {
            errs.push("batch must be >= 2 and eval_every >= 1".to_string());
        }
        for (name, t) in [("sequence", &self.sequence), ("text", &self.text)] {
            if t.cross_attention {
                errs.push(format!("{name} encoder takes no cross-attention"));
            }
            if let Err(Error::Config(e)) = t.validate() {
                errs.extend(e.into_iter().map(|m| format!("{name}: {m}")));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Parameters are registered under `name/`.
#[derive(Clone, Debug)]
pub struct JointEmbedder {
    pub config: JointEmbedConfig,
    seq_in: Linear,
    seq_body: Transformer,
    seq_out: Linear,
    text_embed: Embedding,
    text_body: Transformer,
    text_out: Linear,
    log_tau: ParamId,
}

impl JointEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &JointEmbedConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (ds, dt) = (config.sequence.embed_dim, config.text.embed_dim);
        Ok(JointEmbedder {
            config: config.clone(),
            seq_in: Linear::new(
                store,
                &format!("{name}.seq_in"),
                2 * config.channels,
                ds,
                rng,
            ),
            seq_body: Transformer::new(store, &format!("{name}.seq_body"), &config.sequence, rng)?,
            seq_out: Linear::new(store, &format!("{name}.seq_out"), ds, config.embed_dim, rng),
            text_embed: Embedding::new(
                store,
                &format!("{name}.text_embed"),
                config.description_vocab,
                dt,
                rng,
            ),
            text_body: Transformer::new(store, &format!("{name}.text_body"), &config.text, rng)?,
            text_out: Linear::new(
                store,
                &format!("{name}.text_out"),
                dt,
                config.embed_dim,
                rng,
            ),
            log_tau: store.add(
                format!("{name}.log_tau"),
                Tensor::scalar(config.tau_init.ln()),
            ),
        })
    }

    /// `τ = exp(log τ)`, a rank-0 node.
    pub fn temperature(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let l = tape.param(store, self.log_tau);
        tape.exp(l)
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.value(self.log_tau).item().exp()
    }

    /// Keeps τ inside `[TAU_MIN, TAU_MAX]` after an optimizer step.
    pub fn clamp_temperature(&self, store: &mut ParamStore) {
        let p = store.get_mut(self.log_tau);
        let v = p.value.item().clamp(TAU_MIN.ln(), TAU_MAX.ln());
        p.value = Tensor::scalar(v);
    }

    /// Unit-norm embeddings `[N, E]` for `[T, C]` sequences. Frames are
    /// fed with their first differences. Sequences of equal length share
    /// one batched pass.
    pub fn encode_sequences(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&Tensor],
    ) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::invalid("no sequences to encode"));
        }
        for s in seqs {
            if s.rank() != 2 || s.shape()[0] == 0 || s.shape()[1] != self.config.channels {
                return Err(Error::shape(
                    "encode_sequence",
                    format!(
                        "{:?}, expected [T >= 1, {}]",
                        s.shape(),
                        self.config.channels
                    ),
                ));
            }
        }
        let uniform = seqs.iter().all(|s| s.shape() == seqs[0].shape());
        let pooled = if uniform {
            let x = Tensor::stack(&seqs.iter().map(|s| (*s).clone()).collect::<Vec<_>>())?;
            self.pool_sequences(tape, store, x)?
        } else {
            let mut rows = Vec::with_capacity(seqs.len());
            for s in seqs {
                let x = (*s).clone().reshape(&[1, s.shape()[0], s.shape()[1]])?;
                rows.push(self.pool_sequences(tape, store, x)?);
            }
            tape.concat(&rows, 0)?
        };
        let e = self.seq_out.forward(tape, store, pooled)?;
        Ok(tape.l2_normalize(e))
    }

    fn pool_sequences(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Var> {
        let x = tape.constant(with_deltas(&x));
        let h = self.seq_in.forward(tape, store, x)?;
        let h = self.seq_body.forward(tape, store, h, None, None)?;
        tape.mean_axis(h, 1)
    }

    /// Unit-norm embeddings `[N, E]` for description token lists.
    pub fn encode_descriptions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        descs: &[&[usize]],
    ) -> Result<Var> {
        if descs.is_empty() || descs.iter().any(|d| d.is_empty()) {
            return Err(Error::invalid("descriptions must be non-empty"));
        }
        let l = descs[0].len();
        let pooled = if descs.iter().all(|d| d.len() == l) {
            let ids: Vec<usize> = descs.iter().flat_map(|d| d.iter().copied()).collect();
            self.pool_text(tape, store, &ids, &[descs.len(), l])?
        } else {
            let mut rows = Vec::with_capacity(descs.len());
            for d in descs {
                rows.push(self.pool_text(tape, store, d, &[1, d.len()])?);
            }
            tape.concat(&rows, 0)?
        };
        let e = self.text_out.forward(tape, store, pooled)?;
        Ok(tape.l2_normalize(e))
    }

    fn pool_text(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        shape: &[usize],
    ) -> Result<Var> {
        let h = self.text_embed.forward(tape, store, ids, shape)?;
        let h = self.text_body.forward(tape, store, h, None, None)?;
        tape.mean_axis(h, 1)
    }

    /// Embeds outside any gradient computation.
    pub fn embed_sequences(&self, store: &ParamStore, seqs: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = self.encode_sequences(&mut tape, store, seqs)?;
        Ok(tape.value(v).clone())
    }

    pub fn embed_descriptions(&self, store: &ParamStore, descs: &[&[usize]]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = self.encode_descriptions(&mut tape, store, descs)?;
        Ok(tape.value(v).clone())
    }
}

/// Appends first differences along time to every frame of `[B, T, C]`,
/// giving `[B, T, 2C]`; the first frame's difference is zero.
fn with_deltas(x: &Tensor) -> Tensor {
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = Vec::with_capacity(2 * d.len());
    for i in 0..b * t {
        let row = &d[i * c..(i + 1) * c];
        out.extend_from_slice(row);
        if i % t == 0 {
            out.extend(std::iter::repeat(0.0).take(c));
        } else {
            out.extend(row.iter().zip(&d[(i - 1) * c..i * c]).map(|(a, p)| a - p));
        }
    }
    Tensor::new(vec![b, t, 2 * c], out).expect("doubled channels")
}

#[cfg(test)]
mod tests;
