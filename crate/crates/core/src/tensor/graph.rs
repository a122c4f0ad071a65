//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in creation order, which is already a
//! topological order, so [`Graph::backward`] walks the tape once in reverse.
//! Nodes hold their forward value plus whatever the op needs for its
//! vector-Jacobian product. Leaves created with `requires_grad = false`
//! (constants, detached values) never receive gradients.

use super::error::{Result, TensorError};
use super::kernels::{self, AttnGeom, ConvGeom, NormGeom};
use super::real::{gemm, MatRef, Real};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, F, F),
    Square(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    L1(Var, Var),
    ScaleBatch(Var, Vec<F>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, geom: NormGeom, xhat: Vec<F>, rstd: Vec<F> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<F> },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Upsample2x(Var),
    AddChannelBias(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// is reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, reason: reason.into() }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op_name: &'static str, shape: &[usize], data: Vec<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.push(name, &shape, data, op, &[x])
    }

    /// Elementwise binary op; `b` may be a single-element tensor broadcast over `a`.
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<F> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        };
        let shape = ta.shape().to_vec();
        self.push(name, &shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = F::from_f64(s);
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = F::from_f64(s);
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= F::zero()) {
            return Err(invalid("log", "input must be strictly positive"));
        }
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        let (lo, hi) = (F::from_f64(lo), F::from_f64(hi));
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Elementwise square.
    pub fn pow2(&mut self, x: Var) -> Result<Var> {
        self.unary("pow2", x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push("sum_all", &[1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::from_f64(t.numel() as f64);
        self.push("mean_all", &[1], vec![s], Op::MeanAll(x), &[x])
    }

    /// `mean(|a - b|)` as a one-element tensor.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("l1_distance", ta.shape(), tb.shape()));
        }
        let n = F::from_f64(ta.numel() as f64);
        let s = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum::<F>() / n;
        self.push("l1_distance", &[1], vec![s], Op::L1(a, b), &[a, b])
    }

    /// Multiplies batch item `i` by `factors[i]` (constants, not differentiated).
    pub fn scale_batch(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.shape()[0] != factors.len() {
            return Err(mismatch("scale_batch", t.shape(), &[factors.len()]));
        }
        let per = t.numel() / factors.len();
        let f: Vec<F> = factors.iter().map(|&v| F::from_f64(v)).collect();
        let data = t.data().iter().enumerate().map(|(i, &v)| v * f[i / per]).collect();
        let shape = t.shape().to_vec();
        self.push("scale_batch", &shape, data, Op::ScaleBatch(x, f), &[x])
    }

    /// 2-D cross-correlation. `x`: `[B, Cin, H, W]`, `w`: `[Cout, Cin, k, k]`,
    /// optional `b`: `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if ws[1] != xs[1] {
            return Err(invalid("conv2d", format!("weight expects {} input channels, got {}", ws[1], xs[1])));
        }
        if ws[2] != ws[3] || !(ws[2] == 1 || ws[2] == 3) {
            return Err(invalid("conv2d", format!("unsupported kernel {}x{}", ws[2], ws[3])));
        }
        if !(stride == 1 || stride == 2) {
            return Err(invalid("conv2d", format!("unsupported stride {stride}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(invalid("conv2d", "input smaller than kernel"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &[ws[0]]));
            }
        }
        let geom = ConvGeom { batch: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k: ws[2], stride, pad };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = [geom.batch, geom.cout, geom.out_h(), geom.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", &shape, out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(invalid("group_norm", "expects [B, C, ...]"));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("group_norm affine", self.shape(gamma), &[c]));
        }
        let geom = NormGeom { batch: xs[0], channels: c, spatial: xs[2..].iter().product(), groups };
        let (y, xhat, rstd) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &geom,
            F::from_f64(eps),
        );
        self.push("group_norm", &xs, y, Op::GroupNorm { x, gamma, beta, geom, xhat, rstd }, &[x, gamma, beta])
    }

    /// `softmax(q^T k / sqrt(C)) v` per batch item, tokens laid out over the
    /// trailing spatial dims: `q` is `[B, C, ...Nq]`, `k`/`v` `[B, C, ...Nk]`.
    /// The output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() < 3 || ks != vs || qs[..2] != ks[..2] {
            return Err(mismatch("attention", &qs, &ks));
        }
        let geom = AttnGeom {
            batch: qs[0],
            channels: qs[1],
            nq: qs[2..].iter().product(),
            nk: ks[2..].iter().product(),
        };
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), &geom);
        self.push("attention", &qs, out, Op::Attention { q, k, v, geom, probs }, &[q, k, v])
    }

    /// Attention probabilities of an attention node, `[B, Nq, Nk]` flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Concatenates `[B, Ci, ...]` tensors along dim 1.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(invalid("concat_channels", "expects [B, C, ...]"));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(mismatch("concat_channels", &s0, s));
            }
            channels += s[1];
        }
        let batch = s0[0];
        let spatial: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(batch * channels * spatial);
        for b in 0..batch {
            for &x in xs {
                let t = self.value(x);
                let per = t.shape()[1] * spatial;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        self.push("concat_channels", &shape, data, Op::Concat(xs.to_vec()), xs)
    }

    /// Channels `[start, start + len)` of a `[B, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(invalid("slice_channels", format!("range {start}..{} of {:?}", start + len, s)));
        }
        let spatial: usize = s[2..].iter().product();
        let t = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len * spatial);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * spatial;
            data.extend_from_slice(&t.data()[base..base + len * spatial]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        self.push("slice_channels", &shape, data, Op::SliceChannels { x, start }, &[x])
    }

    /// Splits dim 1 into consecutive pieces of the given sizes.
    pub fn chunk_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = *self.shape(x).get(1).ok_or_else(|| invalid("chunk_channels", "expects [B, C, ...]"))?;
        if sizes.iter().sum::<usize>() != c {
            return Err(invalid("chunk_channels", format!("sizes {sizes:?} do not sum to {c}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("upsample_nearest2x", "expects [B, C, H, W]"));
        }
        let (h, w) = (s[2], s[3]);
        let t = self.value(x);
        let mut data = vec![F::zero(); t.numel() * 4];
        for (p, plane) in t.data().chunks_exact(h * w).enumerate() {
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = plane[(i / 2) * w + j / 2];
                }
            }
        }
        let shape = [s[0], s[1], 2 * h, 2 * w];
        self.push("upsample_nearest2x", &shape, data, Op::Upsample2x(x), &[x])
    }

    /// `x[b, c, ...] + bias[b, c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if s.len() < 2 || bs != s[..2] {
            return Err(mismatch("add_channel_bias", &s, &bs));
        }
        let spatial: usize = s[2..].iter().product();
        let bd = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bd[i / spatial]).collect();
        self.push("add_channel_bias", &s, data, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// `x w^T + b` with `x`: `[B, in]`, `w`: `[out, in]`, `b`: `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (batch, out_dim) = (xs[0], ws[0]);
        let mut data = vec![F::zero(); batch * out_dim];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(mismatch("linear bias", self.shape(b), &[out_dim]));
            }
            let bd = self.value(b).data();
            for row in data.chunks_exact_mut(out_dim) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm(
            F::one(),
            MatRef::new(self.value(x).data(), batch, xs[1]),
            MatRef::new(self.value(w).data(), out_dim, ws[1]).t(),
            beta,
            &mut data,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", &[batch, out_dim], data, Op::Linear { x, w, b }, &inputs)
    }

    /// Reverse pass from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(&node.op, &node.value, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (g, &self.nodes[i].op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(self.nodes[i].value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Gradient for the right operand of a possibly broadcast binary op.
    fn reduce_to(&self, b: Var, a_numel: usize, full: Vec<F>) -> Vec<F> {
        if self.value(b).numel() == a_numel {
            full
        } else {
            vec![full.into_iter().sum()]
        }
    }

    fn vjp(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.value(v).data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    let r = self.reduce_to(*b, g.len(), g.to_vec());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    let r = self.reduce_to(*b, g.len(), g.iter().map(|&x| -x).collect());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bcast = bv.len() != av.len();
                if rg(*a) {
                    let d = g.iter().enumerate().map(|(i, &gi)| gi * if bcast { bv[0] } else { bv[i] }).collect();
                    self.accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = g.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                    let r = self.reduce_to(*b, g.len(), d);
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&gi| gi * *s).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Silu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &v)| {
                        let s = sigmoid(v);
                        gi * s * (F::one() + v * (F::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = g.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = g.iter().zip(val(*x)).map(|(&gi, &v)| gi / v).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &v)| if v >= *lo && v <= *hi { gi } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let two = F::from_f64(2.0);
                let d = g.iter().zip(val(*x)).map(|(&gi, &v)| two * v * gi).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = g.iter().zip(val(*x)).map(|(&gi, &v)| gi * sign(v)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / F::from_f64(n as f64); n]);
            }
            Op::L1(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = g[0] / F::from_f64(av.len() as f64);
                let d: Vec<F> = av.iter().zip(bv).map(|(&x, &y)| sign(x - y) * scale).collect();
                if rg(*b) {
                    self.accumulate(grads, *b, d.iter().map(|&v| -v).collect());
                }
                if rg(*a) {
                    self.accumulate(grads, *a, d);
                }
            }
            Op::ScaleBatch(x, f) => {
                let per = g.len() / f.len();
                let d = g.iter().enumerate().map(|(i, &gi)| gi * f[i / per]).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    rg(*x),
                    rg(*w),
                    b.map(rg).unwrap_or(false),
                );
                if let Some(d) = cg.input {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = cg.weight {
                    self.accumulate(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, cg.bias) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::GroupNorm { x, gamma, beta, geom, xhat, rstd } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(g, xhat, rstd, val(*gamma), geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(g, val(*q), val(*k), val(*v), probs, geom);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Concat(xs) => {
                let s = out.shape();
                let spatial: usize = s[2..].iter().product();
                let total = s[1] * spatial;
                let mut offset = 0;
                for &x in xs {
                    let per = self.shape(x)[1] * spatial;
                    if rg(x) {
                        let mut d = Vec::with_capacity(per * s[0]);
                        for b in 0..s[0] {
                            d.extend_from_slice(&g[b * total + offset..b * total + offset + per]);
                        }
                        self.accumulate(grads, x, d);
                    }
                    offset += per;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let spatial: usize = xs[2..].iter().product();
                let len = out.shape()[1];
                let mut d = vec![F::zero(); self.value(*x).numel()];
                for b in 0..xs[0] {
                    let dst = (b * xs[1] + start) * spatial;
                    let src = b * len * spatial;
                    d[dst..dst + len * spatial].copy_from_slice(&g[src..src + len * spatial]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut d = vec![F::zero(); self.value(*x).numel()];
                for (p, plane) in d.chunks_exact_mut(h * w).enumerate() {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            plane[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::AddChannelBias(x, bias) => {
                if rg(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
                if rg(*bias) {
                    let nb = self.value(*bias).numel();
                    let spatial = g.len() / nb;
                    let d = g.chunks_exact(spatial).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, d);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, in_dim, out_dim) = (xs[0], xs[1], ws[0]);
                let gm = MatRef::new(g, batch, out_dim);
                if rg(*x) {
                    let mut d = vec![F::zero(); batch * in_dim];
                    gemm(F::one(), gm, MatRef::new(val(*w), out_dim, in_dim), F::zero(), &mut d);
                    self.accumulate(grads, *x, d);
                }
                if rg(*w) {
                    let mut d = vec![F::zero(); out_dim * in_dim];
                    gemm(F::one(), gm.t(), MatRef::new(val(*x), batch, in_dim), F::zero(), &mut d);
                    self.accumulate(grads, *w, d);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut d = vec![F::zero(); out_dim];
                        for row in g.chunks_exact(out_dim) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, d);
                    }
                }
            }
        }
    }
}
