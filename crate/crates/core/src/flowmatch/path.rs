use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtPathConfig {
    pub sigma_min: f64,
}

impl Default for OtPathConfig {
    fn default() -> Self {
        OtPathConfig { sigma_min: 1e-5 }
    }
}

impl OtPathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_min > 0.0 && self.sigma_min < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(vec![format!(
                "sigma_min {} must be in (0, 1)",
                self.sigma_min
            )]))
        }
    }
}

/// Point and velocity on the straight conditional path from `x0` to `x1`:
/// `x_t = (1 − (1 − σ)t)·x0 + t·x1`, `v_t = x1 − (1 − σ)·x0`.
pub fn ot_interpolate(
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    cfg: &OtPathConfig,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow step {t} outside [0, 1]")));
    }
    let a = 1.0 - (1.0 - cfg.sigma_min) * t;
    let xt = x0.zip_map(x1, "ot_interpolate", |p, q| a * p + t * q)?;
    let vt = x0.zip_map(x1, "ot_interpolate", |p, q| q - (1.0 - cfg.sigma_min) * p)?;
    Ok((xt, vt))
}

/// Row-wise version: `t[b]` applies to the `b`-th slice along axis 0.
pub fn ot_interpolate_batch(
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
    cfg: &OtPathConfig,
) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(
            "ot_interpolate",
            format!("{:?} vs {:?}", x0.shape(), x1.shape()),
        ));
    }
    if x0.rank() == 0 || x0.shape()[0] != t.len() {
        return Err(Error::shape(
            "ot_interpolate",
            format!("{} flow steps for batch {:?}", t.len(), x0.shape()),
        ));
    }
    let per = x0.len() / t.len().max(1);
    let mut xt = x0.clone();
    let mut vt = x0.clone();
    for (b, &tb) in t.iter().enumerate() {
        let a = 1.0 - (1.0 - cfg.sigma_min) * tb;
        for i in b * per..(b + 1) * per {
            let (p, q) = (x0.data()[i], x1.data()[i]);
            xt.data_mut()[i] = a * p + tb * q;
            vt.data_mut()[i] = q - (1.0 - cfg.sigma_min) * p;
        }
    }
    Ok((xt, vt))
}
