//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly and records its inputs, so node order is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients
//! accumulate additively across repeated `backward` calls until
//! [`Graph::zero_grad`].
//!
//! A graph is single-owner (`Send`, not shared); independent graphs may be
//! built on different threads.

use std::str::FromStr;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Act(Activation, Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    DivScalar(Var, Var),
    Sqrt(Var),
    SliceLeading {
        x: Var,
        start: usize,
        len: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Mask(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {op}")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that takes part in the computation but receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `x[m × n] + b` with `b` broadcast over rows (`b` has `n` elements).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || self.value(b).numel() != sx[1] {
            return Err(Error::shape("add_row", sx, self.shape(b)));
        }
        let n = sx[1];
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, b), rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_finite("activation", t)?;
        let data = t.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Act(kind, x), rg))
    }

    /// Activation selected by name (`tanh`, `relu`, `sigmoid`).
    pub fn elementwise(&mut self, name: &str, x: Var) -> Result<Var> {
        let kind: Activation = name.parse()?;
        self.activation(kind, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// Row-wise softmax of a 2-D tensor, computed with the row maximum
    /// subtracted first.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("softmax_rows", t.shape(), &[0, 0]));
        }
        check_finite("softmax_rows", t)?;
        let cols = t.shape()[1];
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[0, 0]));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over the rows of an `h × d` matrix, giving `1 × d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(Error::shape("mean_rows", t.shape(), &[1, 0]));
        }
        let (h, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; d];
        for row in t.data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / h as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x), rg))
    }

    /// Flattens and concatenates into a `1 × Σ numel` row.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        let n = data.len();
        Ok(self.push(
            Tensor::new(vec![1, n], data)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks equal-sized tensors as the rows of a `k × n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Input("stack of zero tensors".into()))?;
        let n = self.value(*first).numel();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.numel() != n {
                return Err(Error::shape("stack_rows", self.shape(*first), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], data)?,
            Op::StackRows(rows.to_vec()),
            rg,
        ))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        if sv == 0.0 || !sv.is_finite() {
            return Err(Error::Numeric(format!("division by {sv}")));
        }
        let t = self.value(x);
        let data = t.data().iter().map(|v| v / sv).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::DivScalar(x, s), rg))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(
                "sqrt of negative or non-finite value".into(),
            ));
        }
        let data = t.data().iter().map(|v| v.sqrt()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sqrt(x), rg))
    }

    /// `x[start .. start + len, ...]` along the leading axis.
    pub fn slice_leading(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape("slice_leading", shape, &[start, len]));
        }
        let inner: usize = shape[1..].iter().product();
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::SliceLeading { x, start, len },
            rg,
        ))
    }

    /// Grouped convolution of a `C_in × H × W` input with weights
    /// `[C_out, C_in / groups, k, k]`.
    pub fn grouped_conv2d(
        &mut self,
        x: Var,
        w: Var,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), groups, stride, padding)?;
        let out = conv2d_forward(&geo, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(geo.out_shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, geo }, rg))
    }

    /// Per-channel `x * scale[c] + shift[c]` over the leading axis.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.shape().first().copied().unwrap_or(0);
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(Error::shape("channel_affine", t.shape(), self.shape(scale)));
        }
        let inner = t.numel() / c.max(1);
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sc[i / inner] + sh[i / inner])
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Inverted dropout. In inference mode, or with `p == 0`, returns `x`
    /// itself.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mask(x, mask), rg))
    }

    /// `-log softmax(logits)[label]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.numel() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                z.numel()
            )));
        }
        check_finite("cross_entropy", z)?;
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let loss = sum.ln() + max - z.data()[label];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient,
    /// adding into any gradient already stored.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            add_into(&mut self.nodes[i].grad, &g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut adj[v.0], &contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bd[p * n + j];
                            }
                            ga[r * k + p] = s;
                        }
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * g[r * n + j];
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                send(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddRow(x, b) => {
                send(*x, g.to_vec());
                let n = self.value(*b).numel();
                let mut gb = vec![0.0; n];
                for (idx, v) in g.iter().enumerate() {
                    gb[idx % n] += v;
                }
                send(*b, gb);
            }
            Op::Act(kind, x) => {
                let xd = val(*x);
                let yd = node.value.data();
                let gx = g
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                send(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*x, gx);
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (n, m) = (s[0], s[1]);
                let mut gx = vec![0.0; n * m];
                for j in 0..n {
                    for r in 0..m {
                        gx[r * n + j] = g[j * m + r];
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let inv = 1.0 / s[0] as f64;
                let gx = (0..s[0] * s[1]).map(|idx| g[idx % s[1]] * inv).collect();
                send(*x, gx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::StackRows(rows) => {
                let n = node.value.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    send(v, g[r * n..(r + 1) * n].to_vec());
                }
            }
            Op::DivScalar(x, s) => {
                let sv = val(*s)[0];
                send(*x, g.iter().map(|v| v / sv).collect());
                let dot: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                send(*s, vec![-dot / (sv * sv)]);
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(gv, &yv)| if yv > 0.0 { gv * 0.5 / yv } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::SliceLeading { x, start, len } => {
                let s = self.shape(*x);
                let inner: usize = s[1..].iter().product();
                let mut gx = vec![0.0; s[0] * inner];
                gx[start * inner..(start + len) * inner].copy_from_slice(g);
                send(*x, gx);
            }
            Op::Conv2d { x, w, geo } => {
                let (xd, wd) = (val(*x), val(*w));
                let mut gx = self.rg(*x).then(|| vec![0.0; xd.len()]);
                let mut gw = self.rg(*w).then(|| vec![0.0; wd.len()]);
                conv2d_backward(geo, xd, wd, g, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xd = val(*x);
                let sc = val(*scale);
                let c = sc.len();
                let inner = xd.len() / c.max(1);
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(idx, gv)| gv * sc[idx / inner])
                    .collect();
                send(*x, gx);
                let mut gs = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (idx, gv) in g.iter().enumerate() {
                    gs[idx / inner] += gv * xd[idx];
                    gb[idx / inner] += gv;
                }
                send(*scale, gs);
                send(*shift, gb);
            }
            Op::Mask(x, mask) => send(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut gz: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gz[*label] -= g[0];
                send(*logits, gz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_direct_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(mat(&[&[0.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_identity_left() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(mat(&[&[0.3, -1.5], &[2.0, 7.25]]));
        let c = g.matmul(i, a).unwrap();
        assert!(g.value(c).bit_eq(g.value(a)));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0; 4], &[1000.0, 1000.0, 1000.0, 1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert_eq!(*v, 0.25);
        }
        let x = g.constant(mat(&[&[1000.0, 1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(mat(&[&[0.0, 3f64.ln()]]));
        let y = g.softmax_rows(x).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0, f64::NAN]]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
        let x = g.constant(mat(&[&[f64::INFINITY, 0.0]]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[0.0]));
        let s = g.elementwise("sigmoid", x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let r = g.constant(Tensor::row(&[-2.0, 3.0]));
        let r = g.elementwise("relu", r).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        let t = g.elementwise("tanh", x).unwrap();
        let l = g.sum(t);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
        let err = g.elementwise("gelu", x).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn every_tracked_node_gets_a_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[0.3, -0.2]));
        let c = g.constant(Tensor::row(&[1.0, 1.0]));
        let y = g.mul(x, c).unwrap();
        let t = g.tanh(y).unwrap();
        let l = g.sum(t);
        g.backward(l).unwrap();
        for v in [x, y, t, l] {
            assert!(g.grad(v).is_some());
        }
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn dropout_inference_and_zero_p_are_identity() {
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let x = g.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, &mut rng, true),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            g.dropout(x, -0.1, &mut rng, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::row(&[0.0; 7]));
        let l = g.cross_entropy(z, 3).unwrap();
        assert_abs_diff_eq!(g.value(l).data()[0], 7f64.ln(), epsilon = 1e-15);
        g.backward(l).unwrap();
        let gz = g.grad(z).unwrap();
        assert_abs_diff_eq!(gz[3], 1.0 / 7.0 - 1.0, epsilon = 1e-15);
        assert!(matches!(g.cross_entropy(z, 7), Err(Error::Input(_))));
    }
}
