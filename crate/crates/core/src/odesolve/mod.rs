//! ODE integration for sampling.
//!
//! Fields are evaluated on batches: the state tensor's leading axis is the
//! batch and `t` is shared by every row.

mod dopri5;
mod fixed;
mod guided;

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::Result;

pub use dopri5::{integrate_dopri5, integrate_dopri5_dense};
pub use fixed::{fixed_step, integrate_fixed};
pub use guided::{GuidedField, GuidedTapeField};

/// `dx/dt = u(x, t)` on plain tensors.
pub trait VectorField {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// A field that can be evaluated on a tape so gradients flow to `x`, `t`
/// (a rank-0 node) and anything the field closes over.
pub trait TapeField {
    fn eval_tape(&self, tape: &mut Tape, x: Var, t: Var) -> Result<Var>;
}

impl<F: TapeField> VectorField for F {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let tv = tape.constant(Tensor::scalar(t));
        let y = self.eval_tape(&mut tape, xv, tv)?;
        Ok(tape.value(y).clone())
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<G>(pub G);

impl<G: Fn(&Tensor, f64) -> Result<Tensor>> VectorField for FnField<G> {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        (self.0)(x, t)
    }
}

/// Field wrapper that counts evaluations.
pub struct DerivativeField<F> {
    inner: F,
    calls: AtomicUsize,
}

impl<F> DerivativeField<F> {
    pub fn new(inner: F) -> Self {
        DerivativeField {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: VectorField> VectorField for DerivativeField<F> {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let y = self.inner.eval(x, t)?;
        if y.shape() != x.shape() {
            return Err(crate::Error::shape(
                "derivative field",
                format!("state {:?} -> derivative {:?}", x.shape(), y.shape()),
            ));
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    Dopri5,
}

impl Method {
    /// Field evaluations per step for the fixed-step methods.
    pub fn evals_per_step(self) -> Option<usize> {
        match self {
            Method::Euler => Some(1),
            Method::Midpoint => Some(2),
            Method::Rk4 => Some(4),
            Method::Dopri5 => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(crate::Error::invalid(format!(
                "unknown solver method {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Step for the fixed methods; the last step is shortened if it does
    /// not divide the span.
    pub step_size: f64,
    pub atol: f64,
    pub rtol: f64,
    pub t_span: (f64, f64),
    pub max_evals: usize,
    /// Keep the state at every accepted time in the trace.
    #[serde(default)]
    pub record_states: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Midpoint,
            step_size: 0.0625,
            atol: 1e-5,
            rtol: 1e-5,
            t_span: (0.0, 1.0),
            max_evals: 10_000,
            record_states: false,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, steps: usize) -> Self {
        SolverConfig {
            method,
            step_size: 1.0 / steps as f64,
            ..Default::default()
        }
    }

    pub fn dopri5(tol: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            atol: tol,
            rtol: tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.t_span.1 <= self.t_span.0 {
            errs.push(format!("t_span {:?} must be increasing", self.t_span));
        }
        match self.method {
            Method::Dopri5 => {
                if self.atol <= 0.0 || self.rtol <= 0.0 {
                    errs.push("dopri5 tolerances must be > 0".to_string());
                }
            }
            _ => {
                if !(self.step_size > 0.0) {
                    errs.push(format!("step_size {} must be > 0", self.step_size));
                }
            }
        }
        if self.max_evals == 0 {
            errs.push("max_evals must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(errs))
        }
    }
}

/// Accepted times and evaluation accounting for one integration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverTrace {
    pub times: Vec<f64>,
    /// Populated only when `record_states` is set.
    pub states: Vec<Tensor>,
    /// RMS norm of the state at each accepted time.
    pub norms: Vec<f64>,
    /// Cumulative evaluations at each accepted time.
    pub nfe_at: Vec<usize>,
    pub nfe: usize,
    pub rejected: usize,
}

impl SolverTrace {
    fn push(&mut self, t: f64, x: &Tensor, record: bool) {
        self.times.push(t);
        self.norms.push(x.norm() / (x.len().max(1) as f64).sqrt());
        self.nfe_at.push(self.nfe);
        if record {
            self.states.push(x.clone());
        }
    }

    pub fn accepted_steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    /// CSV rows `t,norm,nfe` for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,norm,nfe\n");
        for ((t, n), k) in self.times.iter().zip(&self.norms).zip(&self.nfe_at) {
            let _ = writeln!(s, "{t},{n},{k}");
        }
        s
    }
}

/// Integrates with the configured method.
pub fn integrate(
    field: &dyn VectorField,
    x0: &Tensor,
    config: &SolverConfig,
) -> Result<(Tensor, SolverTrace)> {
    match config.method {
        Method::Dopri5 => integrate_dopri5(field, x0, config),
        _ => integrate_fixed(field, x0, config),
    }
}

/// `f(x) = k·x`.
#[derive(Clone, Debug)]
pub struct ScalarLinearField(pub f64);

impl TapeField for ScalarLinearField {
    fn eval_tape(&self, tape: &mut Tape, x: Var, _t: Var) -> Result<Var> {
        Ok(tape.scale(x, self.0))
    }
}

/// `f(x) = A·x` applied to each row of a `[B, d]` state.
#[derive(Clone, Debug)]
pub struct LinearField(pub Tensor);

impl TapeField for LinearField {
    fn eval_tape(&self, tape: &mut Tape, x: Var, _t: Var) -> Result<Var> {
        let a = tape.constant(self.0.clone());
        tape.matmul_nt(x, a)
    }
}

/// `f(x, t) = c`, broadcast over the batch.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Tensor);

impl TapeField for ConstantField {
    fn eval_tape(&self, tape: &mut Tape, x: Var, _t: Var) -> Result<Var> {
        let zero = tape.scale(x, 0.0);
        let c = tape.constant(self.0.clone());
        tape.add(zero, c)
    }
}
