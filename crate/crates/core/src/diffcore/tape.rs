//! Computation record for reverse-mode gradients.
//!
//! Every primitive appends one node holding its output. Broadcasting in the
//! binary elementwise primitives is restricted to a suffix rule: the smaller
//! operand's shape must equal a trailing slice of the larger one, and it is
//! repeated over the leading dimensions. A rank-0 tensor is a suffix of every
//! shape.
//!
//! Shape rules:
//!
//! | primitive | inputs | output |
//! |---|---|---|
//! | `matmul` | `[.., m, k]` × `[k, n]` or `[.., m, k]` × `[.., k, n]` | `[.., m, n]` |
//! | `matmul_nt` | `[.., m, k]` × `[n, k]` or batched | `[.., m, n]` |
//! | `softmax`, `log_softmax`, `layer_norm`, `l2_normalize` | any, last axis | same |
//! | `concat(axis)` | equal except on `axis` | summed on `axis` |
//! | `slice(axis, start, len)` | any | `len` on `axis` |
//! | `sum`, `mean` | any | scalar |
//! | `sum_axis`, `mean_axis` | any | axis removed |
//! | `time_embed(dim)` | `[B]` | `[B, dim]` |

use std::collections::HashMap;

use super::gemm::{gemm, View};
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    TimeEmbed { t: Var, scale: f64, freqs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it.
///
/// A tape built with [`Tape::no_grad`] keeps values only; it is the cheap
/// path for sampling with frozen parameters.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let (op, needs_grad) = if self.record && needs_grad {
            (op, true)
        } else {
            (Op::Constant, false)
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the node.
    /// Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast(self.value(a), self.value(b), "div", |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Div(a, b), ng))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let ng = self.ng(a);
        self.push(out, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ----- linear algebra -----

    /// Matrix product over the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let dims = MatDims::new(self.value(a).shape(), self.value(b).shape(), trans_b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        if dims.shared_b {
            let bview = b_view(bv, &dims);
            gemm(
                dims.batch * dims.m,
                dims.k,
                dims.n,
                View::row_major(av, dims.k),
                bview,
                0.0,
                &mut out,
            );
        } else {
            let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
            for i in 0..dims.batch {
                gemm(
                    dims.m,
                    dims.k,
                    dims.n,
                    View::row_major(&av[i * sa..(i + 1) * sa], dims.k),
                    b_view(&bv[i * sb..(i + 1) * sb], &dims),
                    0.0,
                    &mut out[i * sc..(i + 1) * sc],
                );
            }
        }
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = dims.n;
        let out = Tensor::new(shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", x.rank())));
        }
        let out = transpose_last2(x);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    // ----- normalizations -----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = last_dim(x);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = last_dim(x);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Normalizes the last axis to zero mean and unit variance, without the
    /// affine part. A constant row maps to zeros.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = last_dim(x);
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / w.max(1));
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(x.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        let op = if ng && self.record {
            Op::LayerNorm { x: a, inv_std }
        } else {
            Op::Constant
        };
        self.push(out, op, ng)
    }

    /// Scales each row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = last_dim(x);
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / w.max(1));
        for row in out.chunks_mut(w) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let out = Tensor::new(x.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::L2Normalize { x: a, norms }, ng)
    }

    // ----- structural -----

    /// Concatenates along `axis` (negative counts from the end).
    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::shape("concat", "no inputs"))?,
            )
            .clone();
        let axis = first.axis(axis);
        if axis >= first.rank() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.rank()
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", s, first.shape()),
                ));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let axis = x.axis(axis);
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "{}..{} on axis {axis} of {:?}",
                    start,
                    start + len,
                    x.shape()
                ),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let full = x.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Slice { x: a, axis, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: isize) -> Result<Var> {
        let x = self.value(a);
        let axis = x.axis(axis);
        if axis >= x.rank() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} of {:?}", x.shape()),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SumAxis { x: a, axis }, ng))
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: isize) -> Result<Var> {
        let axis_u = self.value(a).axis(axis);
        let len = *self
            .value(a)
            .shape()
            .get(axis_u)
            .ok_or_else(|| Error::shape("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ----- embeddings -----

    /// Sinusoidal features of a batch of flow steps `t` (shape `[B]`):
    /// `[sin(scale·t·f_0..f_{h-1}), cos(scale·t·f_0..f_{h-1})]` with
    /// `f_j = 10000^{-j/h}` and `h = dim/2`.
    pub fn time_embed(&mut self, t: Var, dim: usize, scale: f64) -> Result<Var> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "time embedding dim {dim} must be even and > 0"
            )));
        }
        let tv = self.value(t);
        if tv.rank() != 1 {
            return Err(Error::shape(
                "time_embed",
                format!("expected [B], got {:?}", tv.shape()),
            ));
        }
        let freqs = time_freqs(dim);
        let half = dim / 2;
        let b = tv.len();
        let mut data = vec![0.0; b * dim];
        for (i, &tt) in tv.data().iter().enumerate() {
            for (j, f) in freqs.iter().enumerate() {
                let arg = scale * tt * f;
                data[i * dim + j] = arg.sin();
                data[i * dim + half + j] = arg.cos();
            }
        }
        let out = Tensor::new(vec![b, dim], data)?;
        let ng = self.ng(t);
        Ok(self.push(out, Op::TimeEmbed { t, scale, freqs }, ng))
    }

    // ----- backward -----

    /// Reverse pass from a scalar `loss`. Gradients of every node that
    /// depends on a differentiable leaf are returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v.0).and_then(|g| g.clone()).map(|g| (id, g)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || reduce_to(g, self.value(*a).shape()));
                self.acc(grads, *b, || reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || reduce_to(g, self.value(*a).shape()));
                self.acc(grads, *b, || {
                    reduce_to(&g.scale(-1.0), self.value(*b).shape())
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || {
                    reduce_to(&broadcast(g, bv, "mul", |x, y| x * y).unwrap(), av.shape())
                });
                self.acc(grads, *b, || {
                    reduce_to(&broadcast(g, av, "mul", |x, y| x * y).unwrap(), bv.shape())
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || {
                    reduce_to(&broadcast(g, bv, "div", |x, y| x / y).unwrap(), av.shape())
                });
                self.acc(grads, *b, || {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = g.mul(y).unwrap();
                    let t = broadcast(&gy, bv, "div", |x, y| -x / y).unwrap();
                    reduce_to(&t, bv.shape())
                });
            }
            Op::Neg(a) => self.acc(grads, *a, || g.scale(-1.0)),
            Op::Scale(a, k) => self.acc(grads, *a, || g.scale(*k)),
            Op::AddScalar(a) => self.acc(grads, *a, || g.clone()),
            Op::Tanh(a) => self.acc(grads, *a, || {
                g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y)).unwrap()
            }),
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, || {
                    g.zip_map(x, "gelu", |g, x| g * gelu_grad(x)).unwrap()
                })
            }
            Op::Exp(a) => self.acc(grads, *a, || g.mul(y).unwrap()),
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, || g.zip_map(x, "log", |g, x| g / x).unwrap())
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, || {
                    g.zip_map(x, "softplus", |g, x| g * sigmoid(x)).unwrap()
                })
            }
            Op::Sqrt(a) => self.acc(grads, *a, || {
                g.zip_map(y, "sqrt", |g, y| if y > 0.0 { g * 0.5 / y } else { 0.0 })
                    .unwrap()
            }),
            Op::Square(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, || {
                    g.zip_map(x, "square", |g, x| 2.0 * g * x).unwrap()
                })
            }
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g, grads)?,
            Op::Transpose(a) => self.acc(grads, *a, || transpose_last2(g)),
            Op::Softmax(a) => self.acc(grads, *a, || {
                let w = last_dim(y);
                let mut out = vec![0.0; y.len()];
                for ((o, gr), yr) in out
                    .chunks_mut(w)
                    .zip(g.data().chunks(w))
                    .zip(y.data().chunks(w))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                Tensor::new(y.shape().to_vec(), out).unwrap()
            }),
            Op::LogSoftmax(a) => self.acc(grads, *a, || {
                let w = last_dim(y);
                let mut out = vec![0.0; y.len()];
                for ((o, gr), yr) in out
                    .chunks_mut(w)
                    .zip(g.data().chunks(w))
                    .zip(y.data().chunks(w))
                {
                    let s: f64 = gr.iter().sum();
                    for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * s;
                    }
                }
                Tensor::new(y.shape().to_vec(), out).unwrap()
            }),
            Op::LayerNorm { x, inv_std } => self.acc(grads, *x, || {
                let w = last_dim(y);
                let mut out = vec![0.0; y.len()];
                for (((o, gr), yr), is) in out
                    .chunks_mut(w)
                    .zip(g.data().chunks(w))
                    .zip(y.data().chunks(w))
                    .zip(inv_std)
                {
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = is * (gv - mg - yv * mgy);
                    }
                }
                Tensor::new(y.shape().to_vec(), out).unwrap()
            }),
            Op::L2Normalize { x, norms } => self.acc(grads, *x, || {
                let w = last_dim(y);
                let mut out = vec![0.0; y.len()];
                for (((o, gr), yr), n) in out
                    .chunks_mut(w)
                    .zip(g.data().chunks(w))
                    .zip(y.data().chunks(w))
                    .zip(norms)
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                Tensor::new(y.shape().to_vec(), out).unwrap()
            }),
            Op::Concat { parts, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let full = y.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape();
                    let chunk = ps[*axis] * inner;
                    let off = offset;
                    self.acc(grads, p, || {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(
                                &g.data()[o * full + off..o * full + off + chunk],
                            );
                        }
                        Tensor::new(ps.to_vec(), data).unwrap()
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape();
                self.acc(grads, *x, || {
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let full = xs[*axis] * inner;
                    let len = y.shape()[*axis] * inner;
                    let mut data = vec![0.0; xs.iter().product()];
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        data[base..base + len].copy_from_slice(&g.data()[o * len..(o + 1) * len]);
                    }
                    Tensor::new(xs.to_vec(), data).unwrap()
                });
            }
            Op::Reshape(a) => {
                let s = self.value(*a).shape();
                self.acc(grads, *a, || g.clone().reshape(s).unwrap())
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape();
                self.acc(grads, *a, || Tensor::full(s, g.item()))
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, || {
                    Tensor::full(x.shape(), g.item() / x.len() as f64)
                })
            }
            Op::SumAxis { x, axis } => {
                let xs = self.value(*x).shape();
                self.acc(grads, *x, || {
                    let outer: usize = xs[..*axis].iter().product();
                    let len = xs[*axis];
                    let inner: usize = xs[axis + 1..].iter().product();
                    let mut data = vec![0.0; xs.iter().product()];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            data[base..base + inner].copy_from_slice(src);
                        }
                    }
                    Tensor::new(xs.to_vec(), data).unwrap()
                });
            }
            Op::TimeEmbed { t, scale, freqs } => {
                let tv = self.value(*t);
                self.acc(grads, *t, || {
                    let dim = 2 * freqs.len();
                    let half = freqs.len();
                    let data = tv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &tt)| {
                            freqs
                                .iter()
                                .enumerate()
                                .map(|(j, f)| {
                                    let arg = scale * tt * f;
                                    let d = scale * f;
                                    g.data()[i * dim + j] * d * arg.cos()
                                        - g.data()[i * dim + half + j] * d * arg.sin()
                                })
                                .sum()
                        })
                        .collect();
                    Tensor::new(tv.shape().to_vec(), data).unwrap()
                });
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let d = f();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let dims = MatDims::new(av.shape(), bv.shape(), trans_b)?;
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let gd = g.data();
        // dA = dC · Bᵀ
        self.acc(grads, a, || {
            let mut out = vec![0.0; av.len()];
            fn bt(d: &[f64], trans_b: bool, k: usize, n: usize) -> View<'_> {
                if trans_b {
                    View::row_major(d, k)
                } else {
                    View::transposed(d, n)
                }
            }
            if dims.shared_b {
                gemm(
                    dims.batch * m,
                    n,
                    k,
                    View::row_major(gd, n),
                    bt(bv.data(), trans_b, k, n),
                    0.0,
                    &mut out,
                );
            } else {
                for i in 0..dims.batch {
                    gemm(
                        m,
                        n,
                        k,
                        View::row_major(&gd[i * m * n..(i + 1) * m * n], n),
                        bt(&bv.data()[i * k * n..(i + 1) * k * n], trans_b, k, n),
                        0.0,
                        &mut out[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            Tensor::new(av.shape().to_vec(), out).unwrap()
        });
        // dB = Aᵀ · dC, or dC ᵀ · A when B was used transposed.
        self.acc(grads, b, || {
            let mut out = vec![0.0; bv.len()];
            let rows = if dims.shared_b { dims.batch * m } else { m };
            let steps = if dims.shared_b { 1 } else { dims.batch };
            for i in 0..steps {
                let a_blk = &av.data()[i * rows * k..(i + 1) * rows * k];
                let g_blk = &gd[i * rows * n..(i + 1) * rows * n];
                let o_blk = &mut out[i * k * n..(i + 1) * k * n];
                if trans_b {
                    gemm(
                        n,
                        rows,
                        k,
                        View::transposed(g_blk, n),
                        View::row_major(a_blk, k),
                        0.0,
                        o_blk,
                    );
                } else {
                    gemm(
                        k,
                        rows,
                        n,
                        View::transposed(a_blk, k),
                        View::row_major(g_blk, n),
                        0.0,
                        o_blk,
                    );
                }
            }
            Tensor::new(bv.shape().to_vec(), out).unwrap()
        });
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss through a differentiable path.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            if !store.owns(*id) {
                continue;
            }
            let p = store.get_mut(*id);
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

impl MatDims {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let err = || {
            Error::shape(
                if trans_b { "matmul_nt" } else { "matmul" },
                format!("{a:?} x {b:?}"),
            )
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != bk {
            return Err(err());
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let shared_b = b.len() == 2;
        if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(err());
        }
        Ok(MatDims {
            batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        })
    }
}

fn b_view<'a>(b: &'a [f64], d: &MatDims) -> View<'a> {
    if d.trans_b {
        // stored [n, k]; element (kk, j) at j*k + kk
        View::transposed(b, d.k)
    } else {
        View::row_major(b, d.n)
    }
}

fn last_dim(x: &Tensor) -> usize {
    x.shape().last().copied().unwrap_or(1).max(1)
}

fn transpose_last2(x: &Tensor) -> Tensor {
    let r = x.rank();
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (m * n).max(1);
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).unwrap()
}

/// Elementwise binary op under the suffix broadcasting rule.
fn broadcast(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, op, f);
    }
    if a.shape().ends_with(b.shape()) {
        let w = b.len().max(1);
        let data = a
            .data()
            .chunks(w)
            .flat_map(|ch| ch.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.shape().ends_with(a.shape()) {
        let w = a.len().max(1);
        let data = b
            .data()
            .chunks(w)
            .flat_map(|ch| a.data().iter().zip(ch).map(|(&x, &y)| f(x, y)))
            .collect();
        return Tensor::new(b.shape().to_vec(), data);
    }
    Err(Error::shape(
        op,
        format!("{:?} vs {:?}", a.shape(), b.shape()),
    ))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let w: usize = shape.iter().product();
    let mut out = vec![0.0; w];
    for ch in g.data().chunks(w.max(1)) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn time_freqs(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|j| (-(10000f64).ln() * j as f64 / half as f64).exp())
        .collect()
}
