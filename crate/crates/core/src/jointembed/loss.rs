use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Symmetric InfoNCE over the similarity logits `E_a·E_tᵀ / τ`:
///
/// ```text
/// L = −1/(2N) Σ_i [ log softmax_j(S_ij) at j = i  +  log softmax_j(S_ji) at j = i ]
/// ```
///
/// Rows are expected to be unit-norm already. `tau` is a rank-0 node.
pub fn contrastive_loss(tape: &mut Tape, ea: Var, et: Var, tau: Var) -> Result<Var> {
    let (sa, st) = (tape.shape(ea).to_vec(), tape.shape(et).to_vec());
    if sa.len() != 2 || sa != st {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{sa:?} vs {st:?}"),
        ));
    }
    if !tape.shape(tau).is_empty() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("tau {:?}, expected scalar", tape.shape(tau)),
        ));
    }
    let n = sa[0];
    if n == 0 {
        return Err(Error::invalid("contrastive loss needs N >= 1 pairs"));
    }
    let sim = tape.matmul_nt(ea, et)?;
    let logits = tape.div(sim, tau)?;
    let eye = tape.constant(Tensor::eye(n));
    let a2t = tape.log_softmax(logits);
    let a2t = tape.mul(a2t, eye)?;
    let lt = tape.transpose(logits)?;
    let t2a = tape.log_softmax(lt);
    let t2a = tape.mul(t2a, eye)?;
    let both = tape.add(a2t, t2a)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0 / (2.0 * n as f64)))
}
