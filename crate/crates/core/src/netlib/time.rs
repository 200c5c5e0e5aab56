use crate::diffcore::time_freqs;
use crate::{Error, Result};

/// Multiplier applied to the flow step before the sinusoidal features.
pub const DEFAULT_TIME_SCALE: f64 = 100.0;

/// Sinusoidal features of a flow step `t ∈ [0, 1]`: the first half holds
/// `sin(scale·t·f_j)`, the second half `cos(scale·t·f_j)` with
/// `f_j = 10000^{-j/(dim/2)}`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    sinusoidal_embed_scaled(t, dim, DEFAULT_TIME_SCALE)
}

pub fn sinusoidal_embed_scaled(t: f64, dim: usize, scale: f64) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "time embedding dim {dim} must be even and > 0"
        )));
    }
    let freqs = time_freqs(dim);
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for (j, f) in freqs.iter().enumerate() {
        let arg = scale * t * f;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    Ok(out)
}
