use rand::seq::index::sample;

use super::{contrastive_loss, retrieval_metrics, JointEmbedder};
use crate::diffcore::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// One aligned (sequence, description) example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub frames: Tensor,
    pub description: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct JointEmbedTraining {
    pub losses: Vec<f64>,
    /// `(step, A2T@10)` on the validation pairs.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_a2t10: f64,
}

fn a2t10(model: &JointEmbedder, store: &ParamStore, pairs: &[TrainPair]) -> Result<f64> {
    let seqs: Vec<&Tensor> = pairs.iter().map(|p| &p.frames).collect();
    let descs: Vec<&[usize]> = pairs.iter().map(|p| p.description.as_slice()).collect();
    let ea = model.embed_sequences(store, &seqs)?;
    let et = model.embed_descriptions(store, &descs)?;
    Ok(retrieval_metrics(&ea, &et)?.a2t[2])
}

/// Minibatch Adam on the contrastive loss. The store ends holding the
/// parameters with the best validation A2T@10 (earliest on ties).
pub fn train_joint_embed(
    model: &JointEmbedder,
    store: &mut ParamStore,
    train: &[TrainPair],
    valid: &[TrainPair],
    rng: &mut Rng,
) -> Result<JointEmbedTraining> {
    let cfg = &model.config;
    if train.len() < 2 || valid.is_empty() {
        return Err(Error::invalid(format!(
            "joint embedding needs >= 2 training and >= 1 validation pairs, got {} and {}",
            train.len(),
            valid.len()
        )));
    }
    let batch = cfg.batch.min(train.len());
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        clip: Some(1.0),
        warmup_steps: 0,
        ..AdamConfig::default()
    });
    let mut best = (0, a2t10(model, store, valid)?, store.clone());
    let mut out = JointEmbedTraining {
        losses: Vec::with_capacity(cfg.steps),
        validation: vec![(0, best.1)],
        best_step: 0,
        best_a2t10: best.1,
    };
    for step in 1..=cfg.steps {
        let idx = sample(rng, train.len(), batch);
        let seqs: Vec<&Tensor> = idx.iter().map(|i| &train[i].frames).collect();
        let descs: Vec<&[usize]> = idx
            .iter()
            .map(|i| train[i].description.as_slice())
            .collect();
        let mut tape = Tape::new();
        let ea = model.encode_sequences(&mut tape, store, &seqs)?;
        let et = model.encode_descriptions(&mut tape, store, &descs)?;
        let tau = model.temperature(&mut tape, store);
        let loss = contrastive_loss(&mut tape, ea, et, tau)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "contrastive loss {l} at step {step}"
            )));
        }
        out.losses.push(l);
        tape.backward(loss)?.accumulate(store);
        adam_step(store, &mut adam);
        model.clamp_temperature(store);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let r = a2t10(model, store, valid)?;
            out.validation.push((step, r));
            if r > best.1 {
                best = (step, r, store.clone());
            }
        }
    }
    *store = best.2;
    out.best_step = best.0;
    out.best_a2t10 = best.1;
    Ok(out)
}
