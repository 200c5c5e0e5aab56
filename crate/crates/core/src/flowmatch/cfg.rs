use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    pub weight: f64,
}

impl CfgConfig {
    pub const SPEECH: CfgConfig = CfgConfig { weight: 0.7 };
    pub const SOUND: CfgConfig = CfgConfig { weight: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if self.weight >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(vec![format!(
                "guidance weight {} must be >= 0",
                self.weight
            )]))
        }
    }
}

impl Default for CfgConfig {
    fn default() -> Self {
        CfgConfig::SPEECH
    }
}

/// `(1 + w)·u_cond − w·u_uncond`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 0.0 {
        if cond.shape() != uncond.shape() {
            return Err(Error::shape(
                "cfg_field",
                format!("{:?} vs {:?}", cond.shape(), uncond.shape()),
            ));
        }
        return Ok(cond.clone());
    }
    cond.zip_map(uncond, "cfg_field", |c, u| (1.0 + w) * c - w * u)
}

/// Tape version of [`cfg_combine`].
pub fn cfg_combine_var(tape: &mut Tape, cond: Var, uncond: Var, w: f64) -> Result<Var> {
    if tape.shape(cond) != tape.shape(uncond) {
        return Err(Error::shape(
            "cfg_field",
            format!("{:?} vs {:?}", tape.shape(cond), tape.shape(uncond)),
        ));
    }
    if w == 0.0 {
        return Ok(cond);
    }
    let c = tape.scale(cond, 1.0 + w);
    let u = tape.scale(uncond, w);
    tape.sub(c, u)
}
