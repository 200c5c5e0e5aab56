use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

/// Frames per second of every toy sequence.
pub const FRAME_RATE: usize = 10;
/// Token id for silence.
pub const SILENCE_TOKEN: usize = 0;
/// Token id for a generic one-second sound unit.
pub const SOUND_TOKEN: usize = 1;
/// First phone token id; phone `k` is `FIRST_PHONE + k`.
pub const FIRST_PHONE: usize = 2;

/// Raw tokens with per-token frame counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DurationSeq {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
}

impl DurationSeq {
    pub fn new(tokens: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        if tokens.len() != durations.len() {
            return Err(Error::shape(
                "duration sequence",
                format!("{} tokens, {} durations", tokens.len(), durations.len()),
            ));
        }
        Ok(DurationSeq { tokens, durations })
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Repeats each token by its duration.
    pub fn frame_aligned(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.durations)
            .flat_map(|(&t, &d)| std::iter::repeat(t).take(d))
            .collect()
    }
}

/// Transcript for sequences without speech: one sound token per started
/// second, the last one truncated to fit.
pub fn build_pseudo_transcript(duration_seconds: f64, frame_rate: usize) -> Result<DurationSeq> {
    if !(duration_seconds > 0.0) || frame_rate == 0 {
        return Err(Error::invalid(format!(
            "pseudo transcript needs a positive duration and frame rate, got {duration_seconds} s at {frame_rate}/s"
        )));
    }
    let total = (duration_seconds * frame_rate as f64).round() as usize;
    let n = duration_seconds.ceil() as usize;
    let mut durations = Vec::with_capacity(n);
    let mut left = total;
    for _ in 0..n {
        let d = left.min(frame_rate);
        durations.push(d);
        left -= d;
    }
    DurationSeq::new(vec![SOUND_TOKEN; n], durations)
}

/// Adds silence tokens of `left_s` and `right_s` seconds at both ends.
pub fn pad_silence_with(
    seq: &DurationSeq,
    left_s: f64,
    right_s: f64,
    frame_rate: usize,
) -> DurationSeq {
    let frames = |s: f64| (s * frame_rate as f64).round() as usize;
    let mut tokens = Vec::with_capacity(seq.tokens.len() + 2);
    let mut durations = Vec::with_capacity(seq.tokens.len() + 2);
    tokens.push(SILENCE_TOKEN);
    durations.push(frames(left_s));
    tokens.extend_from_slice(&seq.tokens);
    durations.extend_from_slice(&seq.durations);
    tokens.push(SILENCE_TOKEN);
    durations.push(frames(right_s));
    DurationSeq { tokens, durations }
}

/// Pads independent `U[0, 3]` s of silence at both ends.
pub fn pad_silence(seq: &DurationSeq, frame_rate: usize, rng: &mut Rng) -> DurationSeq {
    let l = rng.gen_range(0.0..=3.0);
    let r = rng.gen_range(0.0..=3.0);
    pad_silence_with(seq, l, r, frame_rate)
}
