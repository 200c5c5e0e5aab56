use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Output of [`fm_masked_loss`].
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub loss: Var,
    pub masked_frames: usize,
    /// Set when no frame was masked; the loss is then a constant 0.
    pub empty_mask: bool,
}

/// Squared error between `pred` and `target` averaged over masked frames
/// and channels. Frames are all axes but the last; `mask` holds one flag
/// per frame (`true` = masked, contributes to the loss).
pub fn fm_masked_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    mask: &[bool],
) -> Result<MaskedLoss> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::shape(
            "fm_masked_loss",
            format!("prediction {shape:?} vs target {:?}", target.shape()),
        ));
    }
    let c = *shape
        .last()
        .ok_or_else(|| Error::shape("fm_masked_loss", "scalar prediction"))?;
    let frames = target.len() / c.max(1);
    if mask.len() != frames {
        return Err(Error::shape(
            "fm_masked_loss",
            format!("{} mask flags for {frames} frames", mask.len()),
        ));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(MaskedLoss {
            loss: zero,
            masked_frames: 0,
            empty_mask: true,
        });
    }
    let weights: Vec<f64> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(c))
        .collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let tv = tape.constant(target.clone());
    let d = tape.sub(pred, tv)?;
    let sq = tape.square(d);
    let wsq = tape.mul(sq, w)?;
    let s = tape.sum(wsq);
    let loss = tape.scale(s, 1.0 / (masked * c) as f64);
    Ok(MaskedLoss {
        loss,
        masked_frames: masked,
        empty_mask: false,
    })
}
