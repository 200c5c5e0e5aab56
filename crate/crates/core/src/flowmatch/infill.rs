use super::cfg::CfgConfig;
use super::model::{normal_like, AudioModel, ConditionBundle};
use crate::diffcore::{ParamStore, Tensor};
use crate::odesolve::{integrate, DerivativeField, GuidedField, SolverConfig, SolverTrace};
use crate::rng::Rng;
use crate::{Error, Result};

/// Frames with their generation mask (`true` = generated).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `[T, C]`.
    pub frames: Tensor,
    pub mask: Vec<bool>,
}

/// Result of a batched infill.
#[derive(Clone, Debug)]
pub struct InfillOutput {
    pub sequences: Vec<FeatureSequence>,
    pub trace: SolverTrace,
    /// Forward passes of the model (two per evaluation under guidance).
    pub model_calls: usize,
}

/// Takes generated frames where the mask is set and the context elsewhere.
pub fn splice(generated: &Tensor, bundle: &ConditionBundle) -> Result<FeatureSequence> {
    if generated.shape() != bundle.context.shape() {
        return Err(Error::shape(
            "splice",
            format!(
                "{:?} vs context {:?}",
                generated.shape(),
                bundle.context.shape()
            ),
        ));
    }
    let c = generated.shape()[1];
    let mut frames = bundle.context.clone();
    for (f, &m) in bundle.mask.iter().enumerate() {
        if m {
            frames.data_mut()[f * c..(f + 1) * c].copy_from_slice(generated.row(f));
        }
    }
    Ok(FeatureSequence {
        frames,
        mask: bundle.mask.clone(),
    })
}

/// Draws `x0 ~ N(0, I)` for every bundle, integrates the (optionally guided)
/// field from 0 to 1 and splices the context back in.
pub fn generate_infill(
    model: &AudioModel,
    store: &ParamStore,
    cond: &[ConditionBundle],
    solver: &SolverConfig,
    guidance: Option<CfgConfig>,
    rng: &mut Rng,
) -> Result<InfillOutput> {
    let first = cond
        .first()
        .ok_or_else(|| Error::invalid("generate_infill needs at least one bundle"))?;
    let (t, c) = (first.len(), model.config.channels);
    let x0 = normal_like(&[cond.len(), t, c], rng);
    let (x1, trace, model_calls) = match guidance {
        Some(g) => {
            g.validate()?;
            let uncond: Vec<ConditionBundle> =
                cond.iter().map(ConditionBundle::unconditional).collect();
            let field = GuidedField::new(
                model.field(store, cond),
                model.field(store, &uncond),
                g.weight,
            );
            let (x1, trace) = integrate(&field, &x0, solver)?;
            let calls = field.model_calls();
            (x1, trace, calls)
        }
        None => {
            let field = DerivativeField::new(model.field(store, cond));
            let (x1, trace) = integrate(&field, &x0, solver)?;
            let calls = field.count();
            (x1, trace, calls)
        }
    };
    let sequences = x1
        .unstack()
        .iter()
        .zip(cond)
        .map(|(g, b)| splice(g, b))
        .collect::<Result<_>>()?;
    Ok(InfillOutput {
        sequences,
        trace,
        model_calls,
    })
}
