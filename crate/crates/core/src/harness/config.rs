//! Run configuration.
//!
//! A run is described by one JSON object. Fields and defaults:
//!
//! | field | type | default |
//! |---|---|---|
//! | `mode` | `pretrain`, `finetune-speech`, `finetune-sound`, `finetune-unified`, `bespoke`, `jointembed`, `sample`, `eval` | required |
//! | `seed` | integer | required (or `FLOWBOX_SEED`) |
//! | `corpus` | directory written by `gen-data` | required |
//! | `out_dir` | directory | required |
//! | `run_id` | string | mode and config hash |
//! | `model` | audio model config | sized from the corpus |
//! | `mask`, `dropout`, `solver`, `cfg`, `optimizer` | see the owning modules | module defaults |
//! | `steps`, `batch` | integers | 100, 16 |
//! | `init_checkpoint` | path | required by every mode but `pretrain` and `jointembed` |
//! | `lora_rank` | integer | none (full fine-tuning) |
//! | `bespoke` | bespoke config | module default |
//! | `bespoke_trajectories` | integer | 16 |
//! | `jointembed` | joint-embedding config | sized from the corpus |
//! | `eval_samples` | integer | 32 |
//! | `use_bespoke` | bool | false |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::fnv1a;
use crate::bespoke::BespokeConfig;
use crate::diffcore::AdamConfig;
use crate::flowmatch::{AudioModelConfig, CfgConfig, DropoutPolicy, MaskSpec};
use crate::jointembed::JointEmbedConfig;
use crate::netlib::{TransformerConfig, VoicePromptEncoderConfig};
use crate::odesolve::SolverConfig;
use crate::toydata::CorpusConfig;
use crate::{Error, Result};

/// Environment variable that overrides the `seed` field.
pub const SEED_ENV: &str = "FLOWBOX_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Pretrain,
    FinetuneSpeech,
    FinetuneSound,
    FinetuneUnified,
    Bespoke,
    Jointembed,
    Sample,
    Eval,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::FinetuneSpeech => "finetune-speech",
            Mode::FinetuneSound => "finetune-sound",
            Mode::FinetuneUnified => "finetune-unified",
            Mode::Bespoke => "bespoke",
            Mode::Jointembed => "jointembed",
            Mode::Sample => "sample",
            Mode::Eval => "eval",
        }
    }

    pub fn is_finetune(self) -> bool {
        matches!(
            self,
            Mode::FinetuneSpeech | Mode::FinetuneSound | Mode::FinetuneUnified
        )
    }

    pub fn trains_flow(self) -> bool {
        self == Mode::Pretrain || self.is_finetune()
    }

    pub fn needs_init(self) -> bool {
        !matches!(self, Mode::Pretrain | Mode::Jointembed)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown mode {s:?}")))
    }
}

fn default_steps() -> usize {
    100
}
fn default_batch() -> usize {
    16
}
fn default_trajectories() -> usize {
    16
}
fn default_eval_samples() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: Option<u64>,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub model: Option<AudioModelConfig>,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub dropout: DropoutPolicy,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub cfg: CfgConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    #[serde(default)]
    pub bespoke: BespokeConfig,
    #[serde(default = "default_trajectories")]
    pub bespoke_trajectories: usize,
    #[serde(default)]
    pub jointembed: Option<JointEmbedConfig>,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub use_bespoke: bool,
}

fn collect(errs: &mut Vec<String>, what: &str, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(e)) => errs.extend(e.into_iter().map(|m| format!("{what}: {m}"))),
        Err(e) => errs.push(format!("{what}: {e}")),
    }
}

impl RunConfig {
    pub fn new(
        mode: Mode,
        seed: u64,
        corpus: impl Into<PathBuf>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        RunConfig {
            mode,
            seed: Some(seed),
            corpus: corpus.into(),
            out_dir: out_dir.into(),
            run_id: None,
            model: None,
            mask: MaskSpec::default(),
            dropout: DropoutPolicy::default(),
            solver: SolverConfig::default(),
            cfg: CfgConfig::default(),
            optimizer: AdamConfig::default(),
            steps: default_steps(),
            batch: default_batch(),
            init_checkpoint: None,
            lora_rank: None,
            bespoke: BespokeConfig::default(),
            bespoke_trajectories: default_trajectories(),
            jointembed: None,
            eval_samples: default_eval_samples(),
            use_bespoke: false,
        }
    }

    /// Parses JSON, applies `FLOWBOX_SEED` and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        RunConfig::from_json_with_seed(text, std::env::var(SEED_ENV).ok())
    }

    /// [`RunConfig::from_json`] with an explicit seed override.
    pub fn from_json_with_seed(text: &str, seed_override: Option<String>) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("schema: {e}")]))?;
        if let Some(v) = seed_override {
            let seed = v.trim().parse().map_err(|_| {
                Error::Config(vec![format!("{SEED_ENV}={v:?} is not an unsigned integer")])
            })?;
            cfg.seed = Some(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seed.is_none() {
            errs.push(format!("seed is required (field or {SEED_ENV})"));
        }
        if self.mode.needs_init() && self.init_checkpoint.is_none() {
            errs.push(format!(
                "mode {} requires init_checkpoint",
                self.mode.name()
            ));
        }
        if (self.mode.trains_flow() || self.mode == Mode::Jointembed) && self.steps == 0 {
            errs.push("steps must be >= 1".into());
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".into());
        }
        if self.eval_samples < 2 {
            errs.push("eval_samples must be >= 2".into());
        }
        if self.bespoke_trajectories == 0 {
            errs.push("bespoke_trajectories must be >= 1".into());
        }
        if self.lora_rank.is_some() && !self.mode.is_finetune() {
            errs.push("lora_rank applies to fine-tuning modes only".into());
        }
        if !(self.optimizer.lr > 0.0) {
            errs.push(format!("optimizer.lr {} must be > 0", self.optimizer.lr));
        }
        if self
            .run_id
            .as_deref()
            .is_some_and(|r| r.is_empty() || r.contains([',', '"', '\n']))
        {
            errs.push("run_id must be non-empty without commas, quotes or newlines".into());
        }
        collect(&mut errs, "mask", self.mask.validate());
        collect(&mut errs, "dropout", self.dropout.validate());
        collect(&mut errs, "solver", self.solver.validate());
        collect(&mut errs, "cfg", self.cfg.validate());
        if let Some(m) = &self.model {
            collect(&mut errs, "model", m.validate());
        }
        if let Some(j) = &self.jointembed {
            collect(&mut errs, "jointembed", j.validate());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config carries a seed")
    }

    /// Hash of everything but `out_dir`, so that the same experiment
    /// written to two places keeps one identity.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        fnv1a(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.mode.name(), &self.hash_hex()[..8]))
    }
}

/// Audio model sized for a toy corpus, with captions and voice prompts
/// enabled.
pub fn toy_model_config(corpus: &CorpusConfig) -> AudioModelConfig {
    AudioModelConfig {
        channels: corpus.channels,
        token_vocab: corpus.token_vocab(),
        transformer: TransformerConfig {
            layers: 2,
            heads: 2,
            embed_dim: 32,
            ffn_dim: 64,
            use_unet_skips: true,
            cross_attention: true,
            lora_rank: None,
        },
        time_scale: 100.0,
        description_vocab: corpus.description_vocab(),
        null_description: corpus.null_description(),
        voice_prompt: Some(VoicePromptEncoderConfig {
            layers: 1,
            heads: 2,
            embed_dim: 32,
            ffn_dim: 64,
        }),
    }
}
