//! Central finite differences as an independent gradient oracle.

use super::{ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub const REL_FLOOR: f64 = 1e-6;

/// Max over coordinates of `|analytic − central| / max(REL_FLOOR, |central|)`.
///
/// The floor keeps exactly-zero gradients (e.g. attention key biases) from
/// turning difference noise near 1e-11 into large relative errors.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite difference eps must be > 0"));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!(
                "{} gradient entries for {} coordinates",
                analytic.len(),
                point.len()
            ),
        ));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x)?;
        x[i] = orig - eps;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: format!("finite difference at coordinate {i}"),
            });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Checks the tape gradient of `f` with respect to one input tensor.
pub fn check_input_gradient(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    let shape = point.shape().to_vec();
    finite_diff_check(
        |v| {
            let mut t = Tape::no_grad();
            let x = t.constant(Tensor::new(shape.clone(), v.to_vec())?);
            let y = f(&mut t, x)?;
            Ok(t.value(y).item())
        },
        point.data(),
        analytic.data(),
        eps,
    )
}

/// Checks the gradient of `f` with respect to every trainable parameter of
/// `store`, at the store's current values.
pub fn check_param_gradient(
    store: &mut ParamStore,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
    eps: f64,
) -> Result<f64> {
    store.zero_grad();
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    tape.backward(y)?.accumulate(store);
    let analytic = store.flat_trainable_grad();
    store.zero_grad();
    let point = store.flat_trainable();
    let mut probe = store.clone();
    finite_diff_check(
        |v| {
            probe.set_flat_trainable(v);
            let mut t = Tape::no_grad();
            let y = f(&mut t, &probe)?;
            Ok(t.value(y).item())
        },
        &point,
        &analytic,
        eps,
    )
}
