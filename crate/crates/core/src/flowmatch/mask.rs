use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    PretrainMultispan,
    FinetuneChunk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Probability of masking the whole sequence (no context at all).
    pub p_full: f64,
    pub fraction_low: f64,
    pub fraction_high: f64,
    pub min_span: usize,
    pub mode: MaskMode,
}

impl MaskSpec {
    pub fn pretrain() -> Self {
        MaskSpec {
            p_full: 0.1,
            fraction_low: 0.7,
            fraction_high: 1.0,
            min_span: 10,
            mode: MaskMode::PretrainMultispan,
        }
    }

    pub fn finetune() -> Self {
        MaskSpec {
            mode: MaskMode::FinetuneChunk,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.p_full) {
            errs.push(format!("p_full {} must be in [0, 1]", self.p_full));
        }
        if !(0.0 <= self.fraction_low
            && self.fraction_low <= self.fraction_high
            && self.fraction_high <= 1.0)
        {
            errs.push(format!(
                "mask fractions [{}, {}] must satisfy 0 <= low <= high <= 1",
                self.fraction_low, self.fraction_high
            ));
        }
        if self.min_span == 0 {
            errs.push("min_span must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::pretrain()
    }
}

/// Draws a frame mask of length `t` (`true` = masked).
///
/// Pretraining places non-overlapping spans of at least `min_span` frames
/// until `ceil(f·T)` frames are covered; fine-tuning masks one chunk of
/// `round(f·T)` frames. Sequences shorter than `min_span` are masked whole.
pub fn sample_mask(t: usize, spec: &MaskSpec, rng: &mut Rng) -> Result<Vec<bool>> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    if t < spec.min_span || rng.gen::<f64>() < spec.p_full {
        return Ok(vec![true; t]);
    }
    let f = rng.gen_range(spec.fraction_low..=spec.fraction_high);
    let mut mask = vec![false; t];
    match spec.mode {
        MaskMode::FinetuneChunk => {
            let len = ((f * t as f64).round() as usize).clamp(1, t);
            let start = rng.gen_range(0..=t - len);
            mask[start..start + len].fill(true);
        }
        MaskMode::PretrainMultispan => {
            let target = ((f * t as f64).ceil() as usize).clamp(spec.min_span, t);
            let free = t - target;
            // spans separated by at least one unmasked frame
            let max_spans = (target / spec.min_span).min(free + 1).max(1);
            let k = rng.gen_range(1..=max_spans);
            let lens = compose(target, k, spec.min_span, rng);
            let mut gaps = compose(free - (k - 1), k + 1, 0, rng);
            for g in &mut gaps[1..k] {
                *g += 1;
            }
            let mut pos = 0;
            for i in 0..k {
                pos += gaps[i];
                mask[pos..pos + lens[i]].fill(true);
                pos += lens[i];
            }
        }
    }
    Ok(mask)
}

/// Random composition of `total` into `k` parts, each at least `min`.
fn compose(total: usize, k: usize, min: usize, rng: &mut Rng) -> Vec<usize> {
    let spare = total - k * min;
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.gen_range(0..=spare)).collect();
    cuts.sort_unstable();
    let mut parts = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(spare)) {
        parts.push(min + c - prev);
        prev = c;
    }
    parts
}

/// Lengths of the maximal runs of masked frames.
pub fn masked_runs(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = 0;
    for &m in mask {
        if m {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    runs
}
