//! Flow-matching core: conditional paths, masked loss, masking and
//! condition dropout, guidance, duration modelling, infilling and
//! point-cloud toys on MLP fields.

mod cfg;
mod dropout;
mod duration;
mod infill;
mod loss;
mod mask;
mod model;
mod path;
mod toy;
mod transcript;

pub use cfg::{cfg_combine, cfg_combine_var, CfgConfig};
pub use dropout::{ConditionFlags, DropoutPolicy};
pub use duration::{round_durations, DurationModel, DurationModelConfig};
pub use infill::{generate_infill, splice, FeatureSequence, InfillOutput};
pub use loss::{fm_masked_loss, MaskedLoss};
pub use mask::{masked_runs, sample_mask, MaskMode, MaskSpec};
pub use model::{fm_batch_loss, AudioField, AudioModel, AudioModelConfig, ConditionBundle};
pub use path::{ot_interpolate, ot_interpolate_batch, OtPathConfig};
pub use toy::{prior_samples, sample_mlp_flow, train_mlp_flow, ToyFlowConfig, ToySamples};
pub use transcript::{
    build_pseudo_transcript, pad_silence, pad_silence_with, DurationSeq, FIRST_PHONE, FRAME_RATE,
    SILENCE_TOKEN, SOUND_TOKEN,
};
