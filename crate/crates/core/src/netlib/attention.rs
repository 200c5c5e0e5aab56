use super::layers::Linear;
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Symmetric distance penalties added to pre-softmax attention scores:
/// `bias[h][i][j] = -slope_h · |i - j|`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlibiBias {
    pub slopes: Vec<f64>,
    pub len: usize,
    /// One `[len, len]` matrix per head.
    pub matrices: Vec<Tensor>,
}

/// Geometric slope schedule `2^(-8h/H)` for heads `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64))
        .collect()
}

pub fn alibi_bias(len: usize, heads: usize) -> AlibiBias {
    let slopes = alibi_slopes(heads);
    let matrices = slopes
        .iter()
        .map(|&m| {
            let mut d = vec![0.0; len * len];
            for i in 0..len {
                for j in 0..len {
                    d[i * len + j] = -m * (i as f64 - j as f64).abs();
                }
            }
            Tensor::new(vec![len, len], d).unwrap()
        })
        .collect();
    AlibiBias {
        slopes,
        len,
        matrices,
    }
}

impl AlibiBias {
    pub fn get(&self, head: usize, i: usize, j: usize) -> f64 {
        self.matrices[head].data()[i * self.len + j]
    }
}

/// Multi-head attention with separate query/key/value input projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `query: [B, T, D]`, `context: [B, S, D]`. `bias` holds per-head
    /// `[T, S]` additive terms; `key_mask` is an additive `[B, T, S]` term.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        context: Var,
        bias: Option<&AlibiBias>,
        key_mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, -1, h * dh, dh)?;
            let kh = tape.slice(k, -1, h * dh, dh)?;
            let vh = tape.slice(v, -1, h * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let mut s = tape.scale(s, scale);
            if let Some(b) = bias {
                let bh = tape.constant(b.matrices[h].clone());
                s = tape.add(s, bh)?;
            }
            if let Some(m) = key_mask {
                s = tape.add(s, m)?;
            }
            let a = tape.softmax(s);
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, -1)?
        };
        self.out.forward(tape, store, cat)
    }

    pub fn input_projections_mut(&mut self) -> [&mut Linear; 3] {
        [&mut self.q, &mut self.k, &mut self.v]
    }
}
