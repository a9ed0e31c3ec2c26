use std::str::FromStr;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Shift(f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Relu,
    /// Inputs `[x, weight]` or `[x, weight, bias]`; padding is `kernel / 2`.
    Conv2d { stride: usize },
    Im2col { kernel: usize, stride: usize, padding: usize },
    SpatialMean,
    Sum,
    Broadcast(Vec<usize>),
    Softmax { axis: usize },
    /// Inputs `[x, gamma, beta]`.
    LayerNorm { epsilon: f64 },
    Exp,
    Powf(f64),
}

impl FromStr for OpKind {
    type Err = Error;

    /// Parses the parameter-free kinds.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" | "elementwise-mul" => OpKind::Mul,
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "relu" => OpKind::Relu,
            "spatial-mean" => OpKind::SpatialMean,
            "sum" => OpKind::Sum,
            "exp" => OpKind::Exp,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(shape: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if shape.len() != 3 || kernel == 0 || stride == 0 {
            return Err(Error::shape("im2col", shape, &[kernel, kernel]));
        }
        let (h, w) = (shape[1], shape[2]);
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::shape("im2col", shape, &[kernel, kernel]));
        }
        Ok(Self {
            channels: shape[0],
            height: h,
            width: w,
            kernel,
            stride,
            padding,
            out_h: (h + 2 * padding - kernel) / stride + 1,
            out_w: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Calls `f(col_row, col_col, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + iy as usize) * self.width;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(row, oy * self.out_w + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Relu(Var),
    Im2col(Var, ConvGeom),
    SpatialMean(Var),
    Sum(Var),
    Broadcast(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Exp(Var),
    Powf(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Inputs always precede their outputs.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => Tensor::new(&self.shapes[var.0], g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Generic entry point dispatching on `kind`.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale(c) => arity(1).map(|_| self.scale(inputs[0], *c)),
            OpKind::Shift(c) => arity(1).map(|_| self.shift(inputs[0], *c)),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Reshape(s) => arity(1).and_then(|_| self.reshape(inputs[0], s)),
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Relu => arity(1).map(|_| self.relu(inputs[0])),
            OpKind::Conv2d { stride } => match inputs.len() {
                2 | 3 => {
                    let k = self.shape(inputs[1]).last().copied().unwrap_or(1);
                    self.conv2d(inputs[0], inputs[1], inputs.get(2).copied(), *stride, k / 2)
                }
                _ => arity(2).map(|_| unreachable!()),
            },
            OpKind::Im2col {
                kernel,
                stride,
                padding,
            } => arity(1).and_then(|_| self.im2col(inputs[0], *kernel, *stride, *padding)),
            OpKind::SpatialMean => arity(1).and_then(|_| self.spatial_mean(inputs[0])),
            OpKind::Sum => arity(1).map(|_| self.sum(inputs[0])),
            OpKind::Broadcast(s) => arity(1).and_then(|_| self.broadcast_to(inputs[0], s)),
            OpKind::Softmax { axis } => arity(1).and_then(|_| self.softmax(inputs[0], *axis)),
            OpKind::LayerNorm { epsilon } => {
                arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2], *epsilon))
            }
            OpKind::Exp => arity(1).map(|_| self.exp(inputs[0])),
            OpKind::Powf(p) => arity(1).map(|_| self.powf(inputs[0], *p)),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, rec(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Shift(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::Powf(a, p), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], transpose_data(self.data(a), r, c))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    /// Unfolds a `C x H x W` map into `[C*k*k, H_out*W_out]` patch columns.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), kernel, stride, padding)?;
        let rows = geom.channels * kernel * kernel;
        let cols = geom.out_h * geom.out_w;
        let mut out = vec![0.0; rows * cols];
        let src = self.data(x);
        geom.for_each_tap(|r, c, i| out[r * cols + c] = src[i]);
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(value, Op::Im2col(x, geom), &[x]))
    }

    /// Cross-correlation of a `C_in x H x W` map with `C_out x C_in x k x k` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", &[c_out], self.shape(b)));
            }
        }
        let cols = self.im2col(x, k, stride, padding)?;
        let w2 = self.reshape(weight, &[c_out, sw[1] * k * k])?;
        let mut y = self.matmul(w2, cols)?;
        let n = self.shape(y)[1];
        if let Some(b) = bias {
            let b2 = self.reshape(b, &[c_out, 1])?;
            let bb = self.broadcast_to(b2, &[c_out, n])?;
            y = self.add(y, bb)?;
        }
        let geom = ConvGeom::new(&sx, k, stride, padding)?;
        self.reshape(y, &[c_out, geom.out_h, geom.out_w])
    }

    /// Mean over the spatial extent of a `C x H x W` map, giving `[C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("spatial-mean", s, &[0, 0, 0]));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = self.data(x);
        let out = (0..c)
            .map(|i| d[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[c], out)?;
        Ok(self.push(value, Op::SpatialMean(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.data(x).iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Right-aligned broadcast: every source extent equals the target or is 1.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let map = BroadcastMap::new(&src, shape)?;
        let d = self.data(x);
        let out: Vec<f64> = (0..map.numel).map(|i| d[map.source(i)]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Broadcast(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: s.len(),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (d[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Softmax(x, axis), &[x]))
    }

    /// Normalises each last-dimension vector, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / d;
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mu) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn acc_slice(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], sign: f64) {
        self.acc(grads, v, |s| {
            for (a, b) in s.iter_mut().zip(g) {
                *a += sign * b;
            }
        });
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_slice(grads, *a, g, 1.0);
                self.acc_slice(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_slice(grads, *a, g, 1.0);
                self.acc_slice(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * db[j];
                    }
                });
                self.acc(grads, *b, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * da[j];
                    }
                });
            }
            Op::Scale(a, c) => self.acc_slice(grads, *a, g, *c),
            Op::Shift(a) | Op::Reshape(a) => self.acc_slice(grads, *a, g, 1.0),
            Op::Relu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |s| {
                    for j in 0..s.len() {
                        if x[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * y[j];
                }
            }),
            Op::Powf(a, p) => {
                let x = self.data(*a);
                self.acc(grads, *a, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * p * x[j].powf(p - 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = dC B^T, dB = A^T dC
                self.acc(grads, *a, |s| gemm(m, n, k, g, false, db, true, s, true));
                self.acc(grads, *b, |s| gemm(k, m, n, da, true, g, false, s, true));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let t = transpose_data(g, s[0], s[1]);
                self.acc_slice(grads, *a, &t, 1.0);
            }
            Op::Concat(inputs, axis) => {
                let inner: usize = node.value.shape()[axis + 1..].iter().product();
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    self.acc(grads, *v, |s| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (a, b) in s[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Im2col(x, geom) => {
                let cols = geom.out_h * geom.out_w;
                self.acc(grads, *x, |s| {
                    geom.for_each_tap(|r, c, idx| s[idx] += g[r * cols + c]);
                });
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                self.acc(grads, *x, |buf| {
                    for (j, v) in buf.iter_mut().enumerate() {
                        *v += g[j / hw] / hw as f64;
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Broadcast(x) => {
                let map = BroadcastMap::new(self.shape(*x), node.value.shape())
                    .expect("validated at record time");
                self.acc(grads, *x, |s| {
                    for (j, gv) in g.iter().enumerate() {
                        s[map.source(j)] += gv;
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                self.acc(grads, *x, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                s[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let rows = inv_std.len();
                let gm = self.data(*gamma);
                self.acc(grads, *beta, |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                });
                self.acc(grads, *gamma, |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *x, |s| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (mut sum, mut dot) = (0.0, 0.0);
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gm[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            s[r * d + j] +=
                                scale * (d as f64 * dxhat[j] - sum - xhat[r * d + j] * dot);
                        }
                    }
                });
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

struct BroadcastMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
    numel: usize,
}

impl BroadcastMap {
    fn new(src: &[usize], target: &[usize]) -> Result<Self> {
        if src.len() > target.len() || target.contains(&0) {
            return Err(Error::shape("broadcast", src, target));
        }
        let pad = target.len() - src.len();
        let mut src_strides = vec![0; target.len()];
        let mut stride = 1;
        for d in (0..target.len()).rev() {
            let extent = if d >= pad { src[d - pad] } else { 1 };
            if extent != target[d] && extent != 1 {
                return Err(Error::shape("broadcast", src, target));
            }
            src_strides[d] = if extent == 1 { 0 } else { stride };
            stride *= extent;
        }
        Ok(Self {
            out_shape: target.to_vec(),
            src_strides,
            numel: target.iter().product(),
        })
    }

    fn source(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for d in (0..self.out_shape.len()).rev() {
            let e = self.out_shape[d];
            idx += (flat % e) * self.src_strides[d];
            flat /= e;
        }
        idx
    }
}

/// `c (+)= op(a) * op(b)` with `op(a): m x k`, `op(b): k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
