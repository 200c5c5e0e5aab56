//! Distilled few-step sampling.
//!
//! A base explicit solver is run on a transformed problem: time is
//! reparameterized by a learned monotone piecewise-linear map `t(τ)` and the
//! state is scaled by a learned positive piecewise-linear `s(τ)`, so the
//! solver integrates `x̄(τ) = s(τ)·x(t(τ))` with
//!
//! ```text
//! dx̄/dτ = (s'/s)·x̄ + s·t'·u(x̄/s, t).
//! ```
//!
//! On the knot grid `τ_i = i/n` the map is fixed by `n` positive time
//! increments (softplus of `theta_r`, normalized) and `n + 1` knot scales
//! (`exp(theta_s)`). Zero parameters give the uniform grid and unit
//! scales, reproducing the base solver bit for bit.

mod gt;
mod train;

use serde::{Deserialize, Serialize};

use crate::diffcore::{softplus, ParamStore, Tape, Tensor, Var};
use crate::odesolve::{Method, TapeField};
use crate::{Error, Result};

pub use gt::{generate_gt, interpolate_checkpoint, GroundTruthSet, GroundTruthTrajectory};
pub use train::{bespoke_loss, end_state_rmse, train_bespoke, BespokeConfig, BespokeTraining};

/// Checkpoint section for trained parameters.
pub const SECTION: &str = "bespoke/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BespokeParams {
    pub theta_r: Vec<f64>,
    pub theta_s: Vec<f64>,
}

impl BespokeParams {
    pub fn identity(n: usize) -> Self {
        BespokeParams {
            theta_r: vec![0.0; n],
            theta_s: vec![0.0; n + 1],
        }
    }

    pub fn steps(&self) -> usize {
        self.theta_r.len()
    }

    pub fn param_count(&self) -> usize {
        self.theta_r.len() + self.theta_s.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_r.is_empty() || self.theta_s.len() != self.theta_r.len() + 1 {
            return Err(Error::invalid(format!(
                "bespoke parameters need n >= 1 time increments and n + 1 scales, got {} and {}",
                self.theta_r.len(),
                self.theta_s.len()
            )));
        }
        if self
            .theta_r
            .iter()
            .chain(&self.theta_s)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite {
                what: "bespoke parameters".into(),
            });
        }
        Ok(())
    }

    /// Knot times `t_0 = 0 < ... < t_n = 1`.
    pub fn knots(&self) -> Vec<f64> {
        let mut tape = Tape::no_grad();
        let v = self.vars(&mut tape);
        knot_vars(&mut tape, v.theta_r, self.steps())
            .into_iter()
            .map(|k| tape.value(k).item())
            .collect()
    }

    /// Knot scales `s_i > 0`.
    pub fn scales(&self) -> Vec<f64> {
        self.theta_s.iter().map(|v| v.exp()).collect()
    }

    fn vars(&self, tape: &mut Tape) -> ThetaVars {
        ThetaVars {
            theta_r: tape.constant(Tensor::vector(self.theta_r.clone())),
            theta_s: tape.constant(Tensor::vector(self.theta_s.clone())),
        }
    }

    /// Stores `theta_r`/`theta_s` under [`SECTION`].
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            format!("{SECTION}theta_r"),
            Tensor::vector(self.theta_r.clone()),
        );
        s.add(
            format!("{SECTION}theta_s"),
            Tensor::vector(self.theta_s.clone()),
        );
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{SECTION}{n}"))
                .map(|id| store.value(id).data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing {SECTION}{n}")))
        };
        let p = BespokeParams {
            theta_r: get("theta_r")?,
            theta_s: get("theta_s")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Evaluates `t(τ)` on `[0, 1]`, linear between knots.
pub fn time_reparam(theta_r: &[f64], tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("τ = {tau} outside [0, 1]")));
    }
    let p = BespokeParams {
        theta_r: theta_r.to_vec(),
        theta_s: vec![0.0; theta_r.len() + 1],
    };
    p.validate()?;
    let knots = p.knots();
    let n = theta_r.len();
    let i = ((tau * n as f64).floor() as usize).min(n - 1);
    let frac = tau * n as f64 - i as f64;
    Ok(knots[i] + frac * (knots[i + 1] - knots[i]))
}

/// `theta_r: [n]`, `theta_s: [n + 1]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ThetaVars {
    pub theta_r: Var,
    pub theta_s: Var,
}

impl ThetaVars {
    /// Reads the parameters from a store built by [`BespokeParams::to_store`].
    pub fn from_store(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        let id = |n: &str| {
            store
                .id(&format!("{SECTION}{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {SECTION}{n}")))
        };
        Ok(ThetaVars {
            theta_r: tape.param(store, id("theta_r")?),
            theta_s: tape.param(store, id("theta_s")?),
        })
    }
}

fn element(tape: &mut Tape, v: Var, i: usize) -> Var {
    let e = tape
        .slice(v, 0, i, 1)
        .expect("index within parameter vector");
    tape.reshape(e, &[]).expect("one element")
}

/// Increments are `softplus(θ)/ln 2` (exactly 1 at θ = 0); knots are the
/// partial sums times the reciprocal of the total.
fn knot_vars(tape: &mut Tape, theta_r: Var, n: usize) -> Vec<Var> {
    let sp = tape.softplus(theta_r);
    let inc = tape.scale(sp, 1.0 / softplus(0.0));
    let mut partial = Vec::with_capacity(n);
    let mut acc = element(tape, inc, 0);
    partial.push(acc);
    for i in 1..n {
        let e = element(tape, inc, i);
        acc = tape.add(acc, e).expect("scalars");
        partial.push(acc);
    }
    let one = tape.constant(Tensor::scalar(1.0));
    let inv = tape.div(one, acc).expect("scalars");
    let mut knots = Vec::with_capacity(n + 1);
    knots.push(tape.constant(Tensor::scalar(0.0)));
    for &p in &partial[..n - 1] {
        knots.push(tape.mul(p, inv).expect("scalars"));
    }
    knots.push(one);
    knots
}

/// Knot times and scales as tape nodes.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub times: Vec<Var>,
    pub scales: Vec<Var>,
}

impl Schedule {
    pub fn new(tape: &mut Tape, theta: ThetaVars) -> Result<Self> {
        let n = tape.shape(theta.theta_r).first().copied().unwrap_or(0);
        if n == 0 || tape.shape(theta.theta_s) != [n + 1] {
            return Err(Error::shape(
                "bespoke schedule",
                format!(
                    "theta_r {:?}, theta_s {:?}",
                    tape.shape(theta.theta_r),
                    tape.shape(theta.theta_s)
                ),
            ));
        }
        let times = knot_vars(tape, theta.theta_r, n);
        let s = tape.exp(theta.theta_s);
        let scales = (0..=n).map(|i| element(tape, s, i)).collect();
        Ok(Schedule { times, scales })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// One transformed step from knot `i` to `i + 1`, taking and returning
/// states in the original coordinates. Uses the same number of field
/// evaluations as the base method.
pub fn bespoke_step(
    tape: &mut Tape,
    schedule: &Schedule,
    i: usize,
    method: Method,
    field: &dyn TapeField,
    x: Var,
) -> Result<Var> {
    if i >= schedule.steps() {
        return Err(Error::invalid(format!(
            "step {i} outside {} knots",
            schedule.steps()
        )));
    }
    let (t0, t1) = (schedule.times[i], schedule.times[i + 1]);
    let (s0, s1) = (schedule.scales[i], schedule.scales[i + 1]);
    let dt = tape.sub(t1, t0)?;
    let ds = tape.sub(s1, s0)?;
    // h·ū at fraction c of the step
    let h_ubar = |tape: &mut Tape, c: f64, xbar: Var| -> Result<Var> {
        let (s, t) = if c == 0.0 {
            (s0, t0)
        } else {
            let cds = tape.scale(ds, c);
            let cdt = tape.scale(dt, c);
            (tape.add(s0, cds)?, tape.add(t0, cdt)?)
        };
        let xs = tape.div(xbar, s)?;
        let u = field.eval_tape(tape, xs, t)?;
        let rate = tape.div(ds, s)?;
        let a = tape.mul(xbar, rate)?;
        let sdt = tape.mul(s, dt)?;
        let b = tape.mul(sdt, u)?;
        tape.add(a, b)
    };
    let xbar = tape.mul(x, s0)?;
    let next = match method {
        Method::Euler => {
            let k1 = h_ubar(tape, 0.0, xbar)?;
            tape.add(xbar, k1)?
        }
        Method::Midpoint => {
            let k1 = h_ubar(tape, 0.0, xbar)?;
            let half = tape.scale(k1, 0.5);
            let xm = tape.add(xbar, half)?;
            let k2 = h_ubar(tape, 0.5, xm)?;
            tape.add(xbar, k2)?
        }
        other => {
            return Err(Error::invalid(format!(
                "bespoke base method must be euler or midpoint, got {}",
                other.name()
            )))
        }
    };
    let out = tape.div(next, s1)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite {
            what: format!("bespoke step {i}"),
        });
    }
    Ok(out)
}

/// Runs all `n` bespoke steps from `x0`. Returns the end state and the
/// number of field evaluations.
pub fn bespoke_sample(
    params: &BespokeParams,
    method: Method,
    field: &dyn TapeField,
    x0: &Tensor,
) -> Result<(Tensor, usize)> {
    params.validate()?;
    let per = match method {
        Method::Euler | Method::Midpoint => method.evals_per_step().expect("fixed method"),
        other => {
            return Err(Error::invalid(format!(
                "unsupported bespoke base method {}",
                other.name()
            )))
        }
    };
    let mut tape = Tape::no_grad();
    let theta = params.vars(&mut tape);
    let schedule = Schedule::new(&mut tape, theta)?;
    let mut x = tape.constant(x0.clone());
    for i in 0..schedule.steps() {
        x = bespoke_step(&mut tape, &schedule, i, method, field, x)?;
    }
    Ok((tape.value(x).clone(), per * params.steps()))
}
