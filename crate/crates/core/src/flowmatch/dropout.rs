use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

/// Which conditioning inputs are present for one training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionFlags {
    pub has_ctx: bool,
    pub has_vp: bool,
    pub has_cap: bool,
}

impl ConditionFlags {
    pub const ALL: ConditionFlags = ConditionFlags {
        has_ctx: true,
        has_vp: true,
        has_cap: true,
    };
    pub const NONE: ConditionFlags = ConditionFlags {
        has_ctx: false,
        has_vp: false,
        has_cap: false,
    };

    /// All eight combinations.
    pub fn all_combinations() -> Vec<ConditionFlags> {
        (0..8)
            .map(|i| ConditionFlags {
                has_ctx: i & 4 != 0,
                has_vp: i & 2 != 0,
                has_cap: i & 1 != 0,
            })
            .collect()
    }
}

/// Condition dropout: the voice prompt is drawn first, the context
/// conditionally on it, and the caption independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_vp_absent: f64,
    pub p_ctx_absent_given_vp: f64,
    pub p_ctx_absent_given_no_vp: f64,
    pub p_cap_absent: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy {
            p_vp_absent: 0.5,
            p_ctx_absent_given_vp: 0.7,
            p_ctx_absent_given_no_vp: 0.5,
            p_cap_absent: 0.3,
        }
    }
}

impl DropoutPolicy {
    /// Keeps every condition.
    pub fn none() -> Self {
        DropoutPolicy {
            p_vp_absent: 0.0,
            p_ctx_absent_given_vp: 0.0,
            p_ctx_absent_given_no_vp: 0.0,
            p_cap_absent: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let errs: Vec<String> = [
            ("p_vp_absent", self.p_vp_absent),
            ("p_ctx_absent_given_vp", self.p_ctx_absent_given_vp),
            ("p_ctx_absent_given_no_vp", self.p_ctx_absent_given_no_vp),
            ("p_cap_absent", self.p_cap_absent),
        ]
        .iter()
        .filter(|(_, p)| !(0.0..=1.0).contains(p))
        .map(|(n, p)| format!("{n} {p} must be in [0, 1]"))
        .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> ConditionFlags {
        let has_vp = rng.gen::<f64>() >= self.p_vp_absent;
        let p_ctx_absent = if has_vp {
            self.p_ctx_absent_given_vp
        } else {
            self.p_ctx_absent_given_no_vp
        };
        let has_ctx = rng.gen::<f64>() >= p_ctx_absent;
        let has_cap = rng.gen::<f64>() >= self.p_cap_absent;
        ConditionFlags {
            has_ctx,
            has_vp,
            has_cap,
        }
    }

    /// Exact probability of a flag combination under this policy.
    pub fn joint_probability(&self, f: ConditionFlags) -> f64 {
        let p_vp = if f.has_vp {
            1.0 - self.p_vp_absent
        } else {
            self.p_vp_absent
        };
        let absent = if f.has_vp {
            self.p_ctx_absent_given_vp
        } else {
            self.p_ctx_absent_given_no_vp
        };
        let p_ctx = if f.has_ctx { 1.0 - absent } else { absent };
        let p_cap = if f.has_cap {
            1.0 - self.p_cap_absent
        } else {
            self.p_cap_absent
        };
        p_vp * p_ctx * p_cap
    }
}
