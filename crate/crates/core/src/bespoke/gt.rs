use crate::diffcore::{Tape, Tensor, Var};
use crate::odesolve::{integrate_dopri5_dense, SolverConfig, VectorField};
use crate::{Error, Result};

/// Reference trajectory from one prior sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrajectory {
    /// Prior sample, without batch axis.
    pub x0: Tensor,
    /// States at `k/N` for `k = 0..=N`.
    pub checkpoints: Vec<Tensor>,
    pub guidance: f64,
}

/// Reference trajectories sharing one checkpoint grid, with the states at
/// each checkpoint stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct GroundTruthSet {
    pub n: usize,
    pub trajectories: Vec<GroundTruthTrajectory>,
    /// `(index, reason)` of prior samples whose solve failed.
    pub skipped: Vec<(usize, String)>,
    stacked: Vec<Tensor>,
}

impl GroundTruthSet {
    pub fn new(
        n: usize,
        trajectories: Vec<GroundTruthTrajectory>,
        skipped: Vec<(usize, String)>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::invalid("ground-truth set is empty"));
        }
        if trajectories.iter().any(|t| t.checkpoints.len() != n + 1) {
            return Err(Error::invalid(format!(
                "every trajectory needs {} checkpoints",
                n + 1
            )));
        }
        let stacked = (0..=n)
            .map(|k| {
                Tensor::stack(
                    &trajectories
                        .iter()
                        .map(|t| t.checkpoints[k].clone())
                        .collect::<Vec<_>>(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(GroundTruthSet {
            n,
            trajectories,
            skipped,
            stacked,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Batched states at checkpoint `k`.
    pub fn states(&self, k: usize) -> &Tensor {
        &self.stacked[k]
    }

    pub fn x0(&self) -> &Tensor {
        &self.stacked[0]
    }

    pub fn x1(&self) -> &Tensor {
        &self.stacked[self.n]
    }

    /// Keeps the trajectories at the given indices.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        GroundTruthSet::new(
            self.n,
            idx.iter().map(|&i| self.trajectories[i].clone()).collect(),
            Vec::new(),
        )
    }
}

/// Linear interpolation between the two checkpoints around `t` (a rank-0
/// node), differentiable in `t`.
pub fn interpolate_checkpoint(tape: &mut Tape, set: &GroundTruthSet, t: Var) -> Result<Var> {
    let tv = tape.value(t).item();
    if !(0.0..=1.0).contains(&tv) {
        return Err(Error::invalid(format!(
            "knot time {tv} outside the checkpoint range [0, 1]"
        )));
    }
    let n = set.n as f64;
    let k = ((tv * n).floor() as usize).min(set.n - 1);
    let lo = set.states(k);
    let hi = set.states(k + 1);
    let base = tape.constant(lo.clone());
    let slope = tape.constant(hi.sub(lo)?);
    let off = tape.add_scalar(t, -(k as f64) / n);
    let w = tape.scale(off, n);
    let d = tape.mul(slope, w)?;
    tape.add(base, d)
}

/// Solves from every row of `x0s` with dense dopri5 output at `N + 1`
/// uniform times. Failed solves are skipped and listed.
pub fn generate_gt(
    field: &dyn VectorField,
    x0s: &Tensor,
    n: usize,
    guidance: f64,
    solver: &SolverConfig,
) -> Result<GroundTruthSet> {
    if n == 0 {
        return Err(Error::invalid("ground truth needs N >= 1 steps"));
    }
    let query: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
    let mut trajectories = Vec::new();
    let mut skipped = Vec::new();
    for (i, x0) in x0s.unstack().into_iter().enumerate() {
        let mut shape = vec![1];
        shape.extend_from_slice(x0.shape());
        let batched = x0.clone().reshape(&shape)?;
        match integrate_dopri5_dense(field, &batched, solver, &query) {
            Ok((_, _, states)) => {
                let checkpoints = states
                    .into_iter()
                    .map(|s| s.reshape(x0.shape()))
                    .collect::<Result<Vec<_>>>()?;
                trajectories.push(GroundTruthTrajectory {
                    x0,
                    checkpoints,
                    guidance,
                });
            }
            Err(e @ Error::Solver { .. }) => skipped.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if trajectories.is_empty() {
        return Err(Error::invalid(format!(
            "all {} ground-truth solves failed",
            skipped.len()
        )));
    }
    GroundTruthSet::new(n, trajectories, skipped)
}
