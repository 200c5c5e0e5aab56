use serde::{Deserialize, Serialize};

use super::layers::{Embedding, Linear};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpFieldConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub time_scale: f64,
    /// Number of class labels; one extra "null" label is reserved for the
    /// unconditional field. Zero disables conditioning.
    #[serde(default)]
    pub classes: usize,
}

impl Default for MlpFieldConfig {
    fn default() -> Self {
        MlpFieldConfig {
            data_dim: 2,
            hidden: 64,
            layers: 4,
            time_dim: 16,
            time_scale: 4.0,
            classes: 0,
        }
    }
}

/// Vector field `u(x, t[, label])` for low-dimensional toys: the input,
/// sinusoidal time features and an optional label embedding are
/// concatenated and passed through `layers` GELU hidden layers.
#[derive(Clone, Debug)]
pub struct MlpField {
    pub config: MlpFieldConfig,
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub label: Option<Embedding>,
}

impl MlpField {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &MlpFieldConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.data_dim == 0 {
            return Err(Error::Config(vec![
                "mlp layers, hidden and data_dim must be >= 1".into(),
            ]));
        }
        let label = (config.classes > 0).then(|| {
            Embedding::new(
                store,
                &format!("{name}.label"),
                config.classes + 1,
                config.time_dim,
                rng,
            )
        });
        let mut in_dim = config.data_dim + config.time_dim;
        if label.is_some() {
            in_dim += config.time_dim;
        }
        let mut hidden = Vec::new();
        for i in 0..config.layers {
            hidden.push(Linear::new(
                store,
                &format!("{name}.hidden{i}"),
                in_dim,
                config.hidden,
                rng,
            ));
            in_dim = config.hidden;
        }
        let out = Linear::new(
            store,
            &format!("{name}.out"),
            config.hidden,
            config.data_dim,
            rng,
        );
        Ok(MlpField {
            config: config.clone(),
            hidden,
            out,
            label,
        })
    }

    /// Label index used for the unconditional field.
    pub fn null_label(&self) -> usize {
        self.config.classes
    }

    /// `x: [B, d]`, `t: [B]`; `labels` has length `B` when the field is
    /// class-conditional (use [`MlpField::null_label`] for "no label").
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        t: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let b = tape.shape(x)[0];
        let te = tape.time_embed(t, self.config.time_dim, self.config.time_scale)?;
        let mut parts = vec![x, te];
        if let Some(emb) = &self.label {
            let null = vec![self.null_label(); b];
            let ids = labels.unwrap_or(&null);
            parts.push(emb.forward(tape, store, ids, &[b])?);
        } else if labels.is_some() {
            return Err(Error::invalid("labels supplied to an unconditional field"));
        }
        let mut h = tape.concat(&parts, -1)?;
        for l in &self.hidden {
            h = l.forward(tape, store, h)?;
            h = tape.gelu(h);
        }
        self.out.forward(tape, store, h)
    }

    /// Convenience wrapper evaluating on plain tensors without recording.
    pub fn eval(
        &self,
        store: &ParamStore,
        x: &Tensor,
        t: f64,
        labels: Option<&[usize]>,
    ) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let b = x.rows();
        let xv = tape.constant(x.clone());
        let tv = tape.constant(Tensor::full(&[b], t));
        let y = self.forward(&mut tape, store, xv, tv, labels)?;
        Ok(tape.value(y).clone())
    }
}

/// [`MlpField`] bound to its parameters and optional labels, usable as an
/// ODE right-hand side.
pub struct MlpBound<'a> {
    pub field: &'a MlpField,
    pub store: &'a ParamStore,
    pub labels: Option<Vec<usize>>,
}

impl MlpField {
    pub fn bind<'a>(&'a self, store: &'a ParamStore, labels: Option<Vec<usize>>) -> MlpBound<'a> {
        MlpBound {
            field: self,
            store,
            labels,
        }
    }
}

impl crate::odesolve::TapeField for MlpBound<'_> {
    fn eval_tape(&self, tape: &mut Tape, x: Var, t: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let ones = tape.constant(Tensor::ones(&[b]));
        let tb = tape.mul(ones, t)?;
        self.field
            .forward(tape, self.store, x, tb, self.labels.as_deref())
    }
}
