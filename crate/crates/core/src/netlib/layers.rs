use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Low-rank additive adapter: `x·W + (x·A)·B`, `B` zero at creation.
#[derive(Clone, Debug)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

/// Affine map on the last axis: `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<Lora>,
    name: String,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::randn(&[in_dim, out_dim], rng).scale(std);
        Self::from_weight(store, name, w, true)
    }

    /// Linear map whose weights and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_weight(store, name, Tensor::zeros(&[in_dim, out_dim]), true)
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::randn(&[in_dim, out_dim], rng).scale(std);
        Self::from_weight(store, name, w, false)
    }

    fn from_weight(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Self {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let w = store.add(format!("{name}.w"), w);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
            lora: None,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Attaches a rank-`rank` adapter. The adapter's up-projection is zero,
    /// so the map is unchanged until it is trained.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        rng: &mut Rng,
    ) -> Result<usize> {
        if rank == 0 || rank >= self.in_dim.min(self.out_dim) {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} must be in 1..{} for {}",
                self.in_dim.min(self.out_dim),
                self.name
            )));
        }
        if self.lora.is_some() {
            return Err(Error::invalid(format!(
                "{} already has a LoRA adapter",
                self.name
            )));
        }
        let a = Tensor::randn(&[self.in_dim, rank], rng).scale(1.0 / (self.in_dim as f64).sqrt());
        let a = store.add(format!("{}.lora_a", self.name), a);
        let b = store.add(
            format!("{}.lora_b", self.name),
            Tensor::zeros(&[rank, self.out_dim]),
        );
        self.lora = Some(Lora { a, b, rank });
        Ok(rank * (self.in_dim + self.out_dim))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let mut y = tape.matmul(x, w)?;
        if let Some(l) = &self.lora {
            let a = tape.param(store, l.a);
            let b = tape.param(store, l.b);
            let h = tape.matmul(x, a)?;
            let d = tape.matmul(h, b)?;
            y = tape.add(y, d)?;
        }
        if let Some(b) = self.b {
            let b = tape.param(store, b);
            y = tape.add(y, b)?;
        }
        Ok(y)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        let y = tape.mul(n, g)?;
        tape.add(y, s)
    }
}

/// Lookup table indexed by integer ids, applied as a one-hot product so the
/// table receives gradients.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let table = Tensor::randn(&[vocab, dim], rng);
        Embedding {
            table: store.add(format!("{name}.table"), table),
            vocab,
            dim,
        }
    }

    /// `ids` is laid out row-major with shape `shape`; the output appends
    /// the embedding dimension.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        shape: &[usize],
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("{} ids for shape {shape:?}", ids.len()),
            ));
        }
        let mut onehot = vec![0.0; n * self.vocab];
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.vocab {
                return Err(Error::invalid(format!(
                    "token id {id} >= vocab {}",
                    self.vocab
                )));
            }
            onehot[i * self.vocab + id] = 1.0;
        }
        let mut s = shape.to_vec();
        s.push(self.vocab);
        let oh = tape.constant(Tensor::new(s, onehot)?);
        let table = tape.param(store, self.table);
        tape.matmul(oh, table)
    }
}

/// Two-layer position-wise feed-forward block with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}
