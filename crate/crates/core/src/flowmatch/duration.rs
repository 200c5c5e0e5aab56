use serde::{Deserialize, Serialize};

use super::infill::generate_infill;
use super::model::{AudioModel, AudioModelConfig, ConditionBundle};
use super::transcript::{DurationSeq, FRAME_RATE, SILENCE_TOKEN};
use crate::diffcore::{ParamStore, Tensor};
use crate::netlib::TransformerConfig;
use crate::odesolve::SolverConfig;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationModelConfig {
    pub token_vocab: usize,
    pub transformer: TransformerConfig,
    pub time_scale: f64,
    /// Durations are modelled as `(frames − shift) / scale`.
    pub shift: f64,
    pub scale: f64,
}

impl DurationModelConfig {
    pub fn new(token_vocab: usize) -> Self {
        DurationModelConfig {
            token_vocab,
            transformer: TransformerConfig {
                layers: 2,
                heads: 4,
                embed_dim: 32,
                ffn_dim: 64,
                use_unet_skips: true,
                cross_attention: false,
                lora_rank: None,
            },
            time_scale: crate::netlib::DEFAULT_TIME_SCALE,
            shift: 4.0,
            scale: 2.0,
        }
    }
}

/// One-channel flow-matching model over per-token durations.
#[derive(Clone, Debug)]
pub struct DurationModel {
    pub config: DurationModelConfig,
    pub model: AudioModel,
}

impl DurationModel {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &DurationModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(config.scale > 0.0) {
            return Err(Error::Config(vec![format!(
                "duration scale {} must be > 0",
                config.scale
            )]));
        }
        let mcfg = AudioModelConfig {
            channels: 1,
            token_vocab: config.token_vocab,
            transformer: config.transformer.clone(),
            time_scale: config.time_scale,
            description_vocab: 0,
            null_description: 0,
            voice_prompt: None,
        };
        Ok(DurationModel {
            config: config.clone(),
            model: AudioModel::new(store, name, &mcfg, rng)?,
        })
    }

    /// `[N, 1]` normalized durations.
    pub fn encode(&self, durations: &[usize]) -> Tensor {
        let data = durations
            .iter()
            .map(|&d| (d as f64 - self.config.shift) / self.config.scale)
            .collect();
        Tensor::new(vec![durations.len(), 1], data).expect("column")
    }

    pub fn decode(&self, v: f64) -> f64 {
        v * self.config.scale + self.config.shift
    }

    /// Conditioning over tokens with known durations outside `mask`.
    pub fn bundle(&self, seq: &DurationSeq, mask: Vec<bool>) -> Result<ConditionBundle> {
        ConditionBundle::new(seq.tokens.clone(), &self.encode(&seq.durations), mask)
    }

    /// Averages `m` independent duration samples per token, in frames,
    /// before clamping or rounding.
    pub fn sample_continuous(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        m: usize,
        solver: &SolverConfig,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::invalid(
                "cannot sample durations for an empty token sequence",
            ));
        }
        if m == 0 {
            return Err(Error::invalid("need at least one duration sample"));
        }
        let n = tokens.len();
        let blank = DurationSeq::new(tokens.to_vec(), vec![0; n])?;
        let bundle = self.bundle(&blank, vec![true; n])?;
        let out = generate_infill(&self.model, store, &vec![bundle; m], solver, None, rng)?;
        let mut avg = vec![0.0; n];
        for s in &out.sequences {
            for (a, v) in avg.iter_mut().zip(s.frames.data()) {
                *a += self.decode(*v) / m as f64;
            }
        }
        Ok(avg)
    }

    /// Averaged durations, clamped at zero and rounded, with silence at
    /// either end trimmed to at most 0.1 s.
    pub fn sample_durations(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        m: usize,
        solver: &SolverConfig,
        rng: &mut Rng,
    ) -> Result<DurationSeq> {
        let avg = self.sample_continuous(store, tokens, m, solver, rng)?;
        Ok(round_durations(tokens, &avg))
    }
}

/// Clamp, round and trim edge silence to `FRAME_RATE / 10` frames.
pub fn round_durations(tokens: &[usize], avg: &[f64]) -> DurationSeq {
    let max_silence = (FRAME_RATE / 10).max(1);
    let mut durations: Vec<usize> = avg.iter().map(|&d| d.max(0.0).round() as usize).collect();
    let n = durations.len();
    for i in [0, n - 1] {
        if tokens[i] == SILENCE_TOKEN {
            durations[i] = durations[i].min(max_silence);
        }
    }
    DurationSeq {
        tokens: tokens.to_vec(),
        durations,
    }
}
