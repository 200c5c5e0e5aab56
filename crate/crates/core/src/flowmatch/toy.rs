use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::normal_like;
use super::path::{ot_interpolate_batch, OtPathConfig};
use crate::diffcore::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::netlib::MlpField;
use crate::odesolve::{integrate, DerivativeField, GuidedField, SolverConfig, SolverTrace};
use crate::rng::Rng;
use crate::{Error, Result};

/// Training schedule for an [`MlpField`] on point data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFlowConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    /// Probability of replacing a label by the null label.
    pub label_dropout: f64,
    pub path: OtPathConfig,
}

impl Default for ToyFlowConfig {
    fn default() -> Self {
        ToyFlowConfig {
            steps: 2000,
            batch: 256,
            optimizer: AdamConfig {
                lr: 2e-3,
                clip: Some(1.0),
                warmup_steps: 0,
                ..AdamConfig::default()
            },
            label_dropout: 0.2,
            path: OtPathConfig::default(),
        }
    }
}

/// Minibatch flow matching on rows of `data: [N, d]`; returns the loss of
/// every step. `labels` must be given exactly when the field is
/// class-conditional.
pub fn train_mlp_flow(
    field: &MlpField,
    store: &mut ParamStore,
    data: &Tensor,
    labels: Option<&[usize]>,
    config: &ToyFlowConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let (n, d) = match data.shape() {
        [n, d] if *n > 0 => (*n, *d),
        s => {
            return Err(Error::shape(
                "train_mlp_flow",
                format!("expected non-empty [N, d], got {s:?}"),
            ))
        }
    };
    if labels.is_some_and(|l| l.len() != n) || labels.is_some() != field.label.is_some() {
        return Err(Error::invalid(
            "labels must match the data rows and the field's conditioning",
        ));
    }
    if config.steps == 0 || config.batch == 0 {
        return Err(Error::Config(vec!["steps and batch must be >= 1".into()]));
    }
    config.path.validate()?;
    let mut adam = AdamState::new(config.optimizer.clone());
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch).map(|_| rng.gen_range(0..n)).collect();
        let mut x1 = Vec::with_capacity(config.batch * d);
        for &i in &idx {
            x1.extend_from_slice(data.row(i));
        }
        let x1 = Tensor::new(vec![config.batch, d], x1)?;
        let ts: Vec<f64> = (0..config.batch).map(|_| rng.gen::<f64>()).collect();
        let x0 = normal_like(&[config.batch, d], rng);
        let (xt, vt) = ot_interpolate_batch(&x0, &x1, &ts, &config.path)?;
        let batch_labels: Option<Vec<usize>> = labels.map(|l| {
            idx.iter()
                .map(|&i| {
                    if rng.gen::<f64>() < config.label_dropout {
                        field.null_label()
                    } else {
                        l[i]
                    }
                })
                .collect()
        });
        let mut tape = Tape::new();
        let xv = tape.constant(xt);
        let tv = tape.constant(Tensor::vector(ts));
        let pred = field.forward(&mut tape, store, xv, tv, batch_labels.as_deref())?;
        let target = tape.constant(vt);
        let loss = tape.mse(pred, target)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "toy flow loss {l} at step {}",
                losses.len()
            )));
        }
        losses.push(l);
        tape.backward(loss)?.accumulate(store);
        adam_step(store, &mut adam);
    }
    Ok(losses)
}

/// Samples drawn by integrating the trained field from `x0`.
#[derive(Clone, Debug)]
pub struct ToySamples {
    pub x1: Tensor,
    pub trace: SolverTrace,
    pub model_calls: usize,
}

/// Integrates from the given prior samples. With `guidance`, `labels` are
/// combined with the null label as `(1 + w)·u(x|c) − w·u(x)`.
pub fn sample_mlp_flow(
    field: &MlpField,
    store: &ParamStore,
    x0: &Tensor,
    labels: Option<Vec<usize>>,
    guidance: Option<f64>,
    solver: &SolverConfig,
) -> Result<ToySamples> {
    match guidance {
        Some(w) => {
            let labels = labels.ok_or_else(|| Error::invalid("guidance needs labels"))?;
            let null = vec![field.null_label(); labels.len()];
            let g = GuidedField::new(
                field.bind(store, Some(labels)),
                field.bind(store, Some(null)),
                w,
            );
            let (x1, trace) = integrate(&g, x0, solver)?;
            let model_calls = g.model_calls();
            Ok(ToySamples {
                x1,
                trace,
                model_calls,
            })
        }
        None => {
            let f = DerivativeField::new(field.bind(store, labels));
            let (x1, trace) = integrate(&f, x0, solver)?;
            let model_calls = f.count();
            Ok(ToySamples {
                x1,
                trace,
                model_calls,
            })
        }
    }
}

/// Standard normal prior samples `[n, d]`.
pub fn prior_samples(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    normal_like(&[n, d], rng)
}
