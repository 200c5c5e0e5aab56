use serde::{Deserialize, Serialize};

use super::gt::{interpolate_checkpoint, GroundTruthSet};
use super::{bespoke_sample, bespoke_step, BespokeParams, Schedule, ThetaVars};
use crate::diffcore::{adam_step, AdamConfig, AdamState, Tape, Var};
use crate::odesolve::{Method, TapeField};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BespokeConfig {
    pub n_steps: usize,
    pub method: Method,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for BespokeConfig {
    fn default() -> Self {
        BespokeConfig {
            n_steps: 4,
            method: Method::Midpoint,
            iterations: 300,
            lr: 2e-2,
        }
    }
}

/// Trained parameters and the per-iteration loss.
#[derive(Clone, Debug)]
pub struct BespokeTraining {
    pub params: BespokeParams,
    pub losses: Vec<f64>,
}

/// Mean over trajectories of the summed per-step L2 errors, each step
/// launched from the reference state at the previous knot.
pub fn bespoke_loss(
    tape: &mut Tape,
    theta: ThetaVars,
    set: &GroundTruthSet,
    method: Method,
    field: &dyn TapeField,
) -> Result<Var> {
    let schedule = Schedule::new(tape, theta)?;
    let m = set.len();
    let mut total: Option<Var> = None;
    let mut prev = interpolate_checkpoint(tape, set, schedule.times[0])?;
    for i in 0..schedule.steps() {
        let target = interpolate_checkpoint(tape, set, schedule.times[i + 1])?;
        let step = bespoke_step(tape, &schedule, i, method, field, prev)?;
        let d = tape.sub(target, step)?;
        let flat = tape.reshape(d, &[m, set.x0().len() / m])?;
        let sq = tape.square(flat);
        let ss = tape.sum_axis(sq, -1)?;
        let norms = tape.sqrt(ss);
        let s = tape.sum(norms);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        prev = target;
    }
    let total = total.expect("at least one step");
    Ok(tape.scale(total, 1.0 / m as f64))
}

/// Fits the parameters with Adam, the field frozen. Aborts if the loss
/// grows beyond ten times its initial value.
pub fn train_bespoke(
    field: &dyn TapeField,
    set: &GroundTruthSet,
    config: &BespokeConfig,
) -> Result<BespokeTraining> {
    if config.n_steps == 0 || config.iterations == 0 {
        return Err(Error::Config(vec![
            "n_steps and iterations must be >= 1".into()
        ]));
    }
    let mut store = BespokeParams::identity(config.n_steps).to_store();
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        clip: None,
        warmup_steps: 0,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut tape = Tape::new();
        let theta = ThetaVars::from_store(&mut tape, &store)?;
        let loss = bespoke_loss(&mut tape, theta, set, config.method, field)?;
        let l = tape.value(loss).item();
        if !l.is_finite() || losses.first().is_some_and(|&l0: &f64| l > 10.0 * l0) {
            return Err(Error::Diverged(format!(
                "bespoke loss {l} at iteration {it} (initial {:?}); theta = {:?}",
                losses.first(),
                BespokeParams::from_store(&store)?
            )));
        }
        losses.push(l);
        tape.backward(loss)?.accumulate(&mut store);
        adam_step(&mut store, &mut adam);
    }
    Ok(BespokeTraining {
        params: BespokeParams::from_store(&store)?,
        losses,
    })
}

/// RMS error between bespoke end states and the reference end states.
pub fn end_state_rmse(
    params: &BespokeParams,
    method: Method,
    field: &dyn TapeField,
    set: &GroundTruthSet,
) -> Result<f64> {
    let (x1, _) = bespoke_sample(params, method, field, set.x0())?;
    let d = x1.sub(set.x1())?;
    Ok((d.sq_norm() / d.len() as f64).sqrt())
}
