use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::flowmatch::{DurationSeq, FIRST_PHONE};
use crate::rng::{derive, Rng};
use crate::{Error, Result};

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rate {
    Slow,
    Normal,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pitch {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Clean,
    Noisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub rate: Rate,
    pub pitch: Pitch,
    pub noise: Noise,
}

impl Attributes {
    pub fn all() -> Vec<Attributes> {
        let mut v = Vec::new();
        for rate in [Rate::Slow, Rate::Normal, Rate::Fast] {
            for pitch in [Pitch::Low, Pitch::High] {
                for noise in [Noise::Clean, Noise::Noisy] {
                    v.push(Attributes { rate, pitch, noise });
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub channels: usize,
    /// Number of phone tokens (ids `FIRST_PHONE..FIRST_PHONE + vocab`).
    pub vocab: usize,
    pub styles: usize,
    /// Every utterance is cut to this many frames.
    pub frames: usize,
    /// Mean frames per token for slow/normal/fast speech.
    pub rate_frames: [usize; 3],
    /// Per-token duration jitter drawn uniformly from `-j..=j`.
    pub duration_jitter: usize,
    /// Constant offset added to every channel for low/high pitch.
    pub pitch_offset: [f64; 2],
    /// Frame noise std for clean/noisy utterances.
    pub noise_std: [f64; 2],
    pub template_scale: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Seed of the templates; corpora sharing it share the "language".
    pub world_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            channels: 8,
            vocab: 16,
            styles: 5,
            frames: 32,
            rate_frames: [6, 4, 2],
            duration_jitter: 1,
            pitch_offset: [-0.5, 0.5],
            noise_std: [0.05, 0.3],
            template_scale: 1.0,
            train: 400,
            valid: 50,
            test: 50,
            world_seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.channels == 0 || self.vocab == 0 || self.styles == 0 || self.frames == 0 {
            errs.push("channels, vocab, styles and frames must be >= 1".to_string());
        }
        if self.rate_frames.iter().any(|&r| r <= self.duration_jitter) {
            errs.push(format!(
                "rate_frames {:?} must exceed duration_jitter {}",
                self.rate_frames, self.duration_jitter
            ));
        }
        if self.noise_std.iter().any(|&s| !(s >= 0.0)) {
            errs.push("noise_std must be >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Size of the description-token vocabulary, including the null token.
    pub fn description_vocab(&self) -> usize {
        self.styles + 8
    }

    /// Description token meaning "no caption".
    pub fn null_description(&self) -> usize {
        self.styles + 7
    }

    /// Fixed-order caption `[style, rate, pitch, noise]`.
    pub fn describe(&self, style: usize, a: &Attributes) -> Vec<usize> {
        let s = self.styles;
        vec![
            style,
            s + a.rate as usize,
            s + 3 + a.pitch as usize,
            s + 5 + a.noise as usize,
        ]
    }

    /// Token vocabulary size including silence and sound tokens.
    pub fn token_vocab(&self) -> usize {
        FIRST_PHONE + self.vocab
    }
}

/// Frame templates shared by every corpus drawn with the same world seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    pub config: CorpusConfig,
    /// `templates[style][token]` is a `channels`-vector; indexed by the full
    /// token id, so silence and sound tokens have templates too.
    pub templates: Vec<Vec<Vec<f64>>>,
}

impl ToyWorld {
    pub fn new(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive(config.world_seed, 0);
        let templates = (0..config.styles)
            .map(|_| {
                (0..config.token_vocab())
                    .map(|_| {
                        (0..config.channels)
                            .map(|_| config.template_scale * normal(&mut rng))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(ToyWorld {
            config: config.clone(),
            templates,
        })
    }

    /// Noise-free frames: template plus pitch offset per frame. This is the
    /// exact conditional mean of every frame given tokens, style and labels,
    /// whatever the mask.
    pub fn oracle_mean(&self, seq: &DurationSeq, style: usize, a: &Attributes) -> Result<Tensor> {
        let c = self.config.channels;
        let off = self.config.pitch_offset[a.pitch as usize];
        let mut data = Vec::with_capacity(seq.total_frames() * c);
        for tok in seq.frame_aligned() {
            if tok >= self.config.token_vocab() {
                return Err(Error::invalid(format!(
                    "token {tok} outside the vocabulary"
                )));
            }
            data.extend(self.templates[style][tok].iter().map(|v| v + off));
        }
        Tensor::new(vec![seq.total_frames(), c], data)
    }

    /// Per-frame noise std of the conditional distribution.
    pub fn oracle_std(&self, a: &Attributes) -> f64 {
        self.config.noise_std[a.noise as usize]
    }

    /// Draws one utterance of exactly `config.frames` frames.
    pub fn utterance(
        &self,
        id: String,
        style: usize,
        a: Attributes,
        rng: &mut Rng,
    ) -> Result<ToyUtterance> {
        let cfg = &self.config;
        let base = cfg.rate_frames[a.rate as usize] as i64;
        let j = cfg.duration_jitter as i64;
        let mut tokens = Vec::new();
        let mut durations = Vec::new();
        let mut total = 0;
        while total < cfg.frames {
            let d = (base + rng.gen_range(-j..=j)).max(1) as usize;
            let d = d.min(cfg.frames - total);
            tokens.push(FIRST_PHONE + rng.gen_range(0..cfg.vocab));
            durations.push(d);
            total += d;
        }
        let seq = DurationSeq::new(tokens, durations)?;
        let mean = self.oracle_mean(&seq, style, &a)?;
        let std = self.oracle_std(&a);
        let data = mean.data().iter().map(|m| m + std * normal(rng)).collect();
        let frames = Tensor::new(mean.shape().to_vec(), data)?;
        Ok(ToyUtterance {
            id,
            seq,
            style,
            attributes: a,
            description: cfg.describe(style, &a),
            frames,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub seq: DurationSeq,
    pub style: usize,
    pub attributes: Attributes,
    pub description: Vec<usize>,
    /// `[T, C]`.
    pub frames: Tensor,
}

impl ToyUtterance {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub seed: u64,
    pub config: CorpusConfig,
    pub train: Vec<ToyUtterance>,
    pub valid: Vec<ToyUtterance>,
    pub test: Vec<ToyUtterance>,
}

impl CorpusSplit {
    pub fn all(&self) -> impl Iterator<Item = &ToyUtterance> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Generates train/valid/test utterances with uniformly drawn styles and
/// attributes.
pub fn gen_aligned_corpus(config: &CorpusConfig, seed: u64) -> Result<CorpusSplit> {
    let world = ToyWorld::new(config)?;
    let attrs = Attributes::all();
    let mut rng = derive(seed, 1);
    let make = |n: usize, prefix: &str, rng: &mut Rng| -> Result<Vec<ToyUtterance>> {
        (0..n)
            .map(|i| {
                let style = rng.gen_range(0..config.styles);
                let a = *attrs.choose(rng).expect("attribute table");
                world.utterance(format!("{prefix}-{i:05}"), style, a, rng)
            })
            .collect()
    };
    let train = make(config.train, "train", &mut rng)?;
    let valid = make(config.valid, "valid", &mut rng)?;
    let test = make(config.test, "test", &mut rng)?;
    Ok(CorpusSplit {
        seed,
        config: config.clone(),
        train,
        valid,
        test,
    })
}

/// Picks another utterance of the same style whose attributes differ from
/// the target's in at least one label. With `augment`, an additive noise
/// burst of that std is applied to a random quarter of the prompt.
pub fn select_voice_prompt(
    pool: &[ToyUtterance],
    target: &ToyUtterance,
    augment: Option<f64>,
    rng: &mut Rng,
) -> Result<ToyUtterance> {
    let eligible: Vec<&ToyUtterance> = pool
        .iter()
        .filter(|u| {
            u.id != target.id && u.style == target.style && u.attributes != target.attributes
        })
        .collect();
    let chosen = eligible.choose(rng).ok_or_else(|| {
        Error::Corpus(format!(
            "no eligible voice prompt for style {}",
            target.style
        ))
    })?;
    let mut prompt = (*chosen).clone();
    if let Some(std) = augment {
        let (t, c) = (prompt.frames.shape()[0], prompt.frames.shape()[1]);
        let len = (t / 4).max(1);
        let start = rng.gen_range(0..=t - len);
        let d = prompt.frames.data_mut();
        for v in &mut d[start * c..(start + len) * c] {
            *v += std * normal(rng);
        }
    }
    Ok(prompt)
}
