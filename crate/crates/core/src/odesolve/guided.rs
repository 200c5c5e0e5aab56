use super::{DerivativeField, TapeField, VectorField};
use crate::diffcore::{Tape, Tensor, Var};
use crate::Result;

/// Classifier-free guided field `(1 + w)·u_cond − w·u_uncond`.
///
/// One evaluation of this field costs two model calls; `nfe` counts the
/// former, [`GuidedField::model_calls`] the latter.
pub struct GuidedField<C, U> {
    pub cond: DerivativeField<C>,
    pub uncond: DerivativeField<U>,
    pub weight: f64,
}

impl<C: VectorField, U: VectorField> GuidedField<C, U> {
    pub fn new(cond: C, uncond: U, weight: f64) -> Self {
        GuidedField {
            cond: DerivativeField::new(cond),
            uncond: DerivativeField::new(uncond),
            weight,
        }
    }

    pub fn model_calls(&self) -> usize {
        self.cond.count() + self.uncond.count()
    }
}

impl<C: VectorField, U: VectorField> VectorField for GuidedField<C, U> {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let c = self.cond.eval(x, t)?;
        let u = self.uncond.eval(x, t)?;
        crate::flowmatch::cfg_combine(&c, &u, self.weight)
    }
}

/// Tape version of [`GuidedField`] for differentiable sampling.
pub struct GuidedTapeField<C, U> {
    pub cond: C,
    pub uncond: U,
    pub weight: f64,
}

impl<C: TapeField, U: TapeField> TapeField for GuidedTapeField<C, U> {
    fn eval_tape(&self, tape: &mut Tape, x: Var, t: Var) -> Result<Var> {
        let c = self.cond.eval_tape(tape, x, t)?;
        let u = self.uncond.eval_tape(tape, x, t)?;
        crate::flowmatch::cfg_combine_var(tape, c, u, self.weight)
    }
}
